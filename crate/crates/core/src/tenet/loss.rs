use crate::autodiff::{group_sums, Tape, Var, OVERLAP_FLUSH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::grouping::FeatureGrouping;

/// Orthogonal loss of one `N_c×H_a×W_a` map set: the spatial mean of the
/// pixelwise product of all group-sum maps. Products smaller than `1e-30` in
/// magnitude count as zero.
pub fn orthogonal_loss(a: &Tensor, grouping: &FeatureGrouping) -> Result<f32> {
    let (c, hw) = match *a.shape() {
        [c, h, w] => (c, h * w),
        ref s => return Err(Error::dim("orthogonal_loss", format!("expected C×H×W, got {s:?}"))),
    };
    if grouping.ids.len() != c {
        return Err(Error::dim("orthogonal_loss", "grouping does not cover channels"));
    }
    let groups = grouping.num_groups();
    let sums = group_sums(a.data(), &grouping.ids, groups, hw);
    let total: f64 = (0..hw)
        .map(|p| (0..groups).fold(1.0f32, |acc, l| acc * sums[l * hw + p]))
        .filter(|v| v.abs() >= OVERLAP_FLUSH)
        .map(f64::from)
        .sum();
    Ok((total / hw as f64) as f32)
}

/// Tape handles of every term of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub clean: Var,
    pub inhibited: Var,
    pub orthogonal: Var,
    pub total: Var,
}

/// `L_total = L_c(y, D(A)) + α·L_c(y, ŷ) + μ·L_o(A)`.
pub fn total_loss(
    tape: &mut Tape,
    labels: &[usize],
    logits_clean: Var,
    logits_inhibited: Var,
    orthogonal: Var,
    alpha: f32,
    mu: f32,
) -> Result<LossTerms> {
    if !(alpha >= 0.0 && mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} and mu {mu} must be >= 0")));
    }
    let clean = tape.softmax_cross_entropy(logits_clean, labels)?;
    let inhibited = tape.softmax_cross_entropy(logits_inhibited, labels)?;
    let partial = tape.scale_add(clean, inhibited, alpha)?;
    let total = tape.scale_add(partial, orthogonal, mu)?;
    Ok(LossTerms {
        clean,
        inhibited,
        orthogonal,
        total,
    })
}

/// Scalar form of the objective for already computed terms.
pub fn combine_losses(clean: f32, inhibited: f32, orthogonal: f32, alpha: f32, mu: f32) -> f32 {
    clean + alpha * inhibited + mu * orthogonal
}
