//! Group-wise map weighting.
//!
//! Channel weights are the spatial mean of the gradient of the predicted
//! class score with respect to each feature map, obtained from a probe pass
//! through the classifier head on its own tape.

use crate::autodiff::Tape;
use crate::convnet::{argmax_rows, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::grouping::FeatureGrouping;

/// Result of the weighting probe for a batch of map sets.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    /// `weights[n][j]`: weight of channel `j` of sample `n`.
    pub weights: Vec<Vec<f32>>,
    /// Class predicted by the head on the unmodified maps.
    pub predicted: Vec<usize>,
    /// Head logits on the unmodified maps.
    pub logits: Tensor,
}

/// Channel weights for `a: N×N_c×H_a×W_a`.
///
/// The probe differentiates `Σ_n D(A)[n, argmax D(A)[n]]` with respect to
/// `A` only; the head's parameters enter as constants, so neither the model
/// nor any optimizer state is touched. Samples are independent, so each
/// sample's weights equal those of a single-sample probe.
pub fn gmw_weights(model: &Model, a: &Tensor) -> Result<ProbeResult> {
    let (n, c, h, w) = match *a.shape() {
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(Error::dim("gmw_weights", format!("expected N×C×H×W, got {s:?}"))),
    };
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let av = tape.param(a.clone())?;
    let logits = model.forward_classifier(&mut tape, &params, av)?;
    let logits_value = tape.value(logits).clone();
    let predicted = argmax_rows(&logits_value);
    let score = tape.select_sum(logits, &predicted)?;
    let grads = tape.backward(score)?;
    let ga = grads
        .get(av)
        .ok_or_else(|| Error::InvalidArgument("probe produced no gradient".into()))?;
    let hw = (h * w) as f32;
    let weights = ga
        .data()
        .chunks(c * h * w)
        .map(|sample| {
            sample
                .chunks(h * w)
                .map(|map| map.iter().sum::<f32>() / hw)
                .collect()
        })
        .collect::<Vec<Vec<f32>>>();
    debug_assert_eq!(weights.len(), n);
    Ok(ProbeResult {
        weights,
        predicted,
        logits: logits_value,
    })
}

/// `I_l = (1/n_l) Σ_{ID_j = l} w_j`.
pub fn group_importance(weights: &[f32], grouping: &FeatureGrouping) -> Result<Vec<f32>> {
    if weights.len() != grouping.ids.len() {
        return Err(Error::dim(
            "group_importance",
            format!("{} weights for {} channels", weights.len(), grouping.ids.len()),
        ));
    }
    let mut sums = vec![0.0f32; grouping.num_groups()];
    for (&l, &w) in grouping.ids.iter().zip(weights) {
        sums[l] += w;
    }
    Ok(sums
        .iter()
        .zip(&grouping.sizes)
        .map(|(s, &n)| s / n as f32)
        .collect())
}

/// `m_l = (1/n_l) Σ_{ID_j = l} w_j · a_j` for one `N_c×H_a×W_a` map set.
pub fn group_maps(a: &Tensor, weights: &[f32], grouping: &FeatureGrouping) -> Result<Tensor> {
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::dim("group_maps", format!("expected C×H×W, got {s:?}"))),
    };
    if weights.len() != c || grouping.ids.len() != c {
        return Err(Error::dim("group_maps", "weights or grouping do not cover channels"));
    }
    let hw = h * w;
    let groups = grouping.num_groups();
    let mut out = vec![0.0f32; groups * hw];
    for (j, (&l, &wj)) in grouping.ids.iter().zip(weights).enumerate() {
        let coef = wj / grouping.sizes[l] as f32;
        out[l * hw..(l + 1) * hw]
            .iter_mut()
            .zip(&a.data()[j * hw..(j + 1) * hw])
            .for_each(|(o, v)| *o += coef * v);
    }
    Tensor::new(vec![groups, h, w], out)
}
