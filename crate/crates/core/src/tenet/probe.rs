//! Group ablation: how much the predicted-class confidence drops when one
//! group's channels are removed.

use crate::convnet::{argmax_rows, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::grouping::FeatureGrouping;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceProbe {
    pub predicted: usize,
    /// Softmax probability of `predicted` on the full map set.
    pub confidence: f32,
    /// `confidence − confidence with group l zeroed`, per group.
    pub deltas: Vec<f32>,
}

fn softmax_at(logits: &[f32], class: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f32 = logits.iter().map(|v| (v - max).exp()).sum();
    (logits[class] - max).exp() / total
}

/// Predicted-class confidence of the head on `a: N_c×H_a×W_a` after zeroing
/// the channels of the listed groups. `class` defaults to the prediction on
/// the modified maps.
pub fn confidence_with_groups_zeroed(
    model: &Model,
    a: &Tensor,
    grouping: &FeatureGrouping,
    zeroed: &[usize],
    class: Option<usize>,
) -> Result<(usize, f32)> {
    let (c, hw) = match *a.shape() {
        [c, h, w] => (c, h * w),
        ref s => return Err(Error::dim("group_confidence_probe", format!("expected C×H×W, got {s:?}"))),
    };
    if grouping.ids.len() != c {
        return Err(Error::dim("group_confidence_probe", "grouping does not cover channels"));
    }
    let mut data = a.data().to_vec();
    for (j, l) in grouping.ids.iter().enumerate() {
        if zeroed.contains(l) {
            data[j * hw..(j + 1) * hw].fill(0.0);
        }
    }
    let mut shape = vec![1];
    shape.extend_from_slice(a.shape());
    let logits = model.classify(&Tensor::new(shape, data)?)?;
    let class = class.unwrap_or_else(|| argmax_rows(&logits)[0]);
    Ok((class, softmax_at(logits.data(), class)))
}

/// Confidence deltas for every group of one image `x: C×H×W`.
pub fn group_confidence_probe(model: &Model, x: &Tensor, grouping: &FeatureGrouping) -> Result<ConfidenceProbe> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let a = model.features(&Tensor::new(shape, x.data().to_vec())?)?;
    group_confidence_on_maps(model, &a.slice_outer(0)?, grouping)
}

/// As [`group_confidence_probe`], starting from already extracted maps.
pub fn group_confidence_on_maps(model: &Model, a: &Tensor, grouping: &FeatureGrouping) -> Result<ConfidenceProbe> {
    let (predicted, confidence) = confidence_with_groups_zeroed(model, a, grouping, &[], None)?;
    let deltas = (0..grouping.num_groups())
        .map(|l| {
            confidence_with_groups_zeroed(model, a, grouping, &[l], Some(predicted))
                .map(|(_, c)| confidence - c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfidenceProbe {
        predicted,
        confidence,
        deltas,
    })
}

fn ranks(values: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or the lengths differ.
pub fn spearman(a: &[f32], b: &[f32]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
