//! Stochastic gradient descent with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// Rescale the gradients so their global L2 norm is at most this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f32>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_grad_norm: None,
        }
    }
}

/// Momentum buffers plus the count of applied updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
    pub steps: u64,
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// One update: `g' = c·g + wd·p`, `v = m·v + g'`, `p -= lr·v`, where `c`
/// shrinks the gradients to `max_grad_norm` when set and exceeded.
///
/// Gradients are checked before any parameter is touched, so a rejected
/// update leaves `params` and `state` unchanged.
pub fn sgd_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    config: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if !(config.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", config.lr)));
    }
    if params.len() != grads.len() {
        return Err(Error::dim(
            "sgd_update",
            format!("{} params vs {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "sgd_update",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: i,
                step: state.steps,
            });
        }
    }
    if let Some(max) = config.max_grad_norm {
        if !(max > 0.0) {
            return Err(Error::InvalidArgument(format!("max_grad_norm must be > 0, got {max}")));
        }
    }
    let clip = match config.max_grad_norm {
        Some(max) => {
            let norm = global_norm(grads);
            if norm > f64::from(max) {
                (f64::from(max) / norm) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    if state.velocity.is_empty() && config.momentum != 0.0 {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = config.weight_decay;
        if config.momentum != 0.0 {
            let v = state.velocity[i].data_mut();
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = clip * gv + wd * *pv;
                *vv = config.momentum * *vv + d;
                *pv -= config.lr * *vv;
            }
        } else {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                let d = clip * gv + wd * *pv;
                *pv -= config.lr * d;
            }
        }
    }
    state.steps += 1;
    Ok(())
}
