//! Reversed maps and the group-wise inhibited classifier pass.

use crate::autodiff::{Tape, Var};
use crate::convnet::{BoundParams, Model};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

use super::config::MaskMode;

/// Rectified reverse function: `rm_l = [I_l > 0] · 1/(1 + e^{m_l})`.
///
/// `m: G×H×W` group maps, `importance: G` group scores. Groups with
/// `I_l <= 0` are zero everywhere.
pub fn rrf(m: &Tensor, importance: &[f32]) -> Result<Tensor> {
    reversed_maps(m, importance, MaskMode::Rrf, None)
}

/// Reversed maps under any [`MaskMode`]. The binary mask keeps values below
/// `binary_threshold`, or below the map's own mean when it is `None`.
pub fn reversed_maps(m: &Tensor, importance: &[f32], mode: MaskMode, binary_threshold: Option<f32>) -> Result<Tensor> {
    let (g, hw) = match *m.shape() {
        [g, h, w] => (g, h * w),
        ref s => return Err(Error::dim("rrf", format!("expected G×H×W, got {s:?}"))),
    };
    if importance.len() != g {
        return Err(Error::dim("rrf", format!("{} scores for {g} groups", importance.len())));
    }
    let mut out = vec![0.0f32; g * hw];
    for (l, &score) in importance.iter().enumerate() {
        let src = &m.data()[l * hw..(l + 1) * hw];
        let dst = &mut out[l * hw..(l + 1) * hw];
        let active = score > 0.0;
        match (mode, active) {
            (MaskMode::Rrf, false) | (MaskMode::Binary, false) => {}
            (MaskMode::PassthroughInactive, false) => dst.fill(1.0),
            (MaskMode::Rrf, true) | (MaskMode::PassthroughInactive, true) => {
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = sigmoid(-v));
            }
            (MaskMode::Binary, true) => {
                let threshold = binary_threshold.unwrap_or_else(|| src.iter().sum::<f32>() / hw as f32);
                dst.iter_mut()
                    .zip(src)
                    .for_each(|(d, &v)| *d = if v < threshold { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Expands per-sample reversed maps `N×G×H×W` to a per-channel mask
/// `N×C×H×W` following each sample's group ids.
pub fn expand_group_mask(rm: &Tensor, ids: &[Vec<usize>]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(rm.clone())?;
    let out = tape.group_gather(v, ids)?;
    Ok(tape.value(out).clone())
}

/// `D(RM ⊗ A)` with `RM` treated as a constant mask.
///
/// `rm: N×G×H×W`, `ids[n][j]` the group of channel `j` of sample `n`. The
/// head is the model's own classifier, so its weights are shared with the
/// clean pass recorded on the same tape.
pub fn inhibited_forward(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    a: Var,
    rm: &Tensor,
    ids: &[Vec<usize>],
) -> Result<Var> {
    let a_shape = tape.value(a).shape().to_vec();
    let rm_shape = rm.shape();
    if rm_shape.len() != 4 || a_shape.len() != 4 || rm_shape[0] != a_shape[0] || rm_shape[2..] != a_shape[2..] {
        return Err(Error::dim(
            "inhibited_forward",
            format!("reversed maps {rm_shape:?} vs maps {a_shape:?}"),
        ));
    }
    if ids.iter().flatten().any(|&l| l >= rm_shape[1]) || ids.iter().any(|r| r.len() != a_shape[1]) {
        return Err(Error::dim(
            "inhibited_forward",
            format!("grouping does not match {} reversed maps", rm_shape[1]),
        ));
    }
    let mask = expand_group_mask(rm, ids)?;
    let mask = tape.constant(mask)?;
    let masked = tape.hadamard(a, mask)?;
    model.forward_classifier(tape, params, masked)
}

/// Inhibited pass with the reversed maps rebuilt on the tape from `A`, so the
/// training loss also differentiates through `M` and the sigmoid. Channel
/// weights stay constant.
#[allow(clippy::too_many_arguments)]
pub(crate) fn inhibited_forward_attached(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    a: Var,
    weights: &[Vec<f32>],
    importance: &[Vec<f32>],
    ids: &[Vec<usize>],
    groups: usize,
    mode: MaskMode,
) -> Result<Var> {
    let n = ids.len();
    let m = tape.group_weighted_mean(a, weights, ids, groups)?;
    let neg = tape.scale(m, -1.0)?;
    let reversed = tape.sigmoid(neg)?;
    let gate: Vec<f32> = importance
        .iter()
        .flat_map(|row| row.iter().map(|&i| if i > 0.0 { 1.0 } else { 0.0 }))
        .collect();
    let gate = tape.constant(Tensor::new(vec![n, groups, 1, 1], gate.clone())?)?;
    let mut rm = tape.hadamard(reversed, gate)?;
    if mode == MaskMode::PassthroughInactive {
        let shape = tape.value(rm).shape().to_vec();
        let hw = shape[2] * shape[3];
        let inactive: Vec<f32> = importance
            .iter()
            .flat_map(|row| row.iter().flat_map(move |&i| std::iter::repeat_n(if i > 0.0 { 0.0 } else { 1.0 }, hw)))
            .collect();
        let inactive = tape.constant(Tensor::new(shape, inactive)?)?;
        rm = tape.scale_add(rm, inactive, 1.0)?;
    }
    let mask = tape.group_gather(rm, ids)?;
    let masked = tape.hadamard(a, mask)?;
    model.forward_classifier(tape, params, masked)
}

/// Min-max normalized `relu(Σ_j w_j a_j)` for one `C×H×W` map set; an
/// all-constant map normalizes to zeros.
pub fn class_activation_map(a: &Tensor, weights: &[f32]) -> Result<Tensor> {
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim("class_activation_map", format!("expected C×H×W, got {s:?}"))),
    };
    if weights.len() != c {
        return Err(Error::dim("class_activation_map", "one weight per channel required"));
    }
    let hw = h * w;
    let mut cam = vec![0.0f32; hw];
    for (j, &wj) in weights.iter().enumerate() {
        cam.iter_mut()
            .zip(&a.data()[j * hw..(j + 1) * hw])
            .for_each(|(o, v)| *o += wj * v);
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    normalize_min_max(&mut cam);
    Tensor::new(vec![h, w], cam)
}

pub(crate) fn normalize_min_max(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        values.fill(0.0);
    }
}
