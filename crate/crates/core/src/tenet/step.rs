//! One training step with group-wise inhibition, and the plain
//! cross-entropy step it degenerates to.

use crate::autodiff::Tape;
use crate::convnet::Model;
use crate::error::{Error, Result};
use crate::optim::{sgd_update, SgdConfig, SgdState};
use crate::tensor::Tensor;

use super::config::{GroupingMode, MaskMode, TenetConfig};
use super::grouping::{cfg_group, FeatureGrouping};
use super::inhibition::{class_activation_map, inhibited_forward, inhibited_forward_attached, reversed_maps};
use super::loss::total_loss;
use super::weighting::{gmw_weights, group_importance, group_maps, ProbeResult};

/// Grouping, weighting and reversed maps of one sample.
#[derive(Clone, Debug)]
pub struct SampleAnalysis {
    pub grouping: FeatureGrouping,
    pub weights: Vec<f32>,
    pub importance: Vec<f32>,
    /// Group maps `G×H_a×W_a`.
    pub maps: Tensor,
    /// Reversed maps `G×H_a×W_a`.
    pub reversed: Tensor,
}

impl SampleAnalysis {
    pub fn active_groups(&self) -> usize {
        self.importance.iter().filter(|&&i| i > 0.0).count()
    }
}

/// Derives a per-sample seed from a step seed.
pub fn sample_seed(step_seed: u64, sample: usize) -> u64 {
    let mut z = step_seed ^ (sample as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs grouping, weighting and the reverse function for every sample of
/// `a: N×N_c×H_a×W_a`.
pub fn analyze(
    model: &Model,
    a: &Tensor,
    config: &TenetConfig,
    seed: u64,
) -> Result<(ProbeResult, Vec<SampleAnalysis>)> {
    config.validate()?;
    let n = *a.shape().first().unwrap_or(&0);
    let probe = gmw_weights(model, a)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sample = a.slice_outer(i)?;
        let weights = probe.weights[i].clone();
        let channels = weights.len();
        let analysis = match config.grouping_mode {
            GroupingMode::Group | GroupingMode::Channel => {
                let grouping = if config.grouping_mode == GroupingMode::Group {
                    cfg_group(
                        &sample,
                        config.num_groups,
                        config.cfg_restarts,
                        config.cfg_max_iters,
                        sample_seed(seed, i),
                    )?
                } else {
                    FeatureGrouping::singletons(channels)
                };
                let importance = group_importance(&weights, &grouping)?;
                let maps = group_maps(&sample, &weights, &grouping)?;
                let reversed = reversed_maps(&maps, &importance, config.mask_mode, config.binary_threshold)?;
                SampleAnalysis {
                    grouping,
                    weights,
                    importance,
                    maps,
                    reversed,
                }
            }
            GroupingMode::Instance => {
                let grouping = FeatureGrouping::single_group(channels);
                let cam = class_activation_map(&sample, &weights)?;
                let shape = cam.shape().to_vec();
                let maps = cam.reshape(vec![1, shape[0], shape[1]])?;
                // The shared map always inhibits.
                let importance = vec![1.0];
                let reversed = reversed_maps(&maps, &importance, config.mask_mode, config.binary_threshold)?;
                SampleAnalysis {
                    grouping,
                    weights,
                    importance,
                    maps,
                    reversed,
                }
            }
        };
        out.push(analysis);
    }
    Ok((probe, out))
}

/// Losses and group statistics of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_clean: f32,
    pub loss_inhibited: f32,
    pub loss_orthogonal: f32,
    pub loss_total: f32,
    /// Mean number of groups with positive importance per sample.
    pub active_groups: f32,
    /// Per-sample importance scores sorted descending, averaged over the batch.
    pub importance: Vec<f32>,
    /// Group sizes in the same order as `importance`, averaged over the batch.
    pub group_sizes: Vec<f32>,
}

impl StepReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "step",
        "l_c_clean",
        "l_c_inhibited",
        "l_o",
        "l_total",
        "active_groups",
        "importance",
    ];

    /// One CSV row; per-group scores are `;`-joined in a single column.
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.loss_clean.to_string(),
            self.loss_inhibited.to_string(),
            self.loss_orthogonal.to_string(),
            self.loss_total.to_string(),
            self.active_groups.to_string(),
            self.importance
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ]
    }

    fn baseline(step: u64, loss: f32) -> Self {
        Self {
            step,
            loss_clean: loss,
            loss_inhibited: 0.0,
            loss_orthogonal: 0.0,
            loss_total: loss,
            active_groups: 0.0,
            importance: Vec::new(),
            group_sizes: Vec::new(),
        }
    }
}

fn summarize(analyses: &[SampleAnalysis]) -> (f32, Vec<f32>, Vec<f32>) {
    let n = analyses.len().max(1) as f32;
    let groups = analyses.first().map_or(0, |a| a.importance.len());
    let mut importance = vec![0.0f32; groups];
    let mut sizes = vec![0.0f32; groups];
    let mut active = 0.0f32;
    for a in analyses {
        let mut order: Vec<usize> = (0..a.importance.len()).collect();
        order.sort_by(|&x, &y| a.importance[y].total_cmp(&a.importance[x]));
        for (slot, &l) in order.iter().enumerate() {
            importance[slot] += a.importance[l] / n;
            sizes[slot] += a.grouping.sizes[l] as f32 / n;
        }
        active += a.active_groups() as f32 / n;
    }
    (active, importance, sizes)
}

fn non_finite(step: u64, err: Error, partial: &str) -> Error {
    match err {
        Error::NonFinite { op, node } => Error::NonFiniteLoss {
            step,
            report: format!("{partial}; {op} produced a non-finite value at tape node {node}"),
        },
        other => other,
    }
}

/// One update of both the feature extractor and the head on the objective
/// `L_c(y, D(A)) + α·L_c(y, D(RM ⊗ A)) + μ·L_o(A)`.
///
/// The feature extractor runs once; the head runs on `A` and on the
/// inhibited maps with shared weights; a single backward pass updates all
/// parameters. `step_seed` seeds the per-sample grouping restarts.
pub fn tenet_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    config: &TenetConfig,
    sgd: &SgdConfig,
    state: &mut SgdState,
    step_seed: u64,
) -> Result<StepReport> {
    let step = state.steps;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true)?;
    let x = tape.constant(images.clone())?;
    let a = model.forward_features(&mut tape, &params, x)?;
    let a_value = tape.value(a).clone();
    let groups = config.effective_groups(a_value.shape()[1]);

    let (probe, analyses) = analyze(model, &a_value, config, step_seed)?;
    let ids: Vec<Vec<usize>> = analyses.iter().map(|s| s.grouping.ids.clone()).collect();
    let (active_groups, importance, group_sizes) = summarize(&analyses);
    let partial = format!("step {step}: active_groups {active_groups}, importance {importance:?}");

    let logits_clean = model
        .forward_classifier(&mut tape, &params, a)
        .map_err(|e| non_finite(step, e, &partial))?;
    let attached = !config.detach_rm
        && config.mask_mode != MaskMode::Binary
        && config.grouping_mode != GroupingMode::Instance;
    let logits_inhibited = if attached {
        let scores: Vec<Vec<f32>> = analyses.iter().map(|s| s.importance.clone()).collect();
        inhibited_forward_attached(
            model,
            &mut tape,
            &params,
            a,
            &probe.weights,
            &scores,
            &ids,
            groups,
            config.mask_mode,
        )
    } else {
        let reversed = Tensor::stack(&analyses.iter().map(|s| s.reversed.clone()).collect::<Vec<_>>())?;
        inhibited_forward(model, &mut tape, &params, a, &reversed, &ids)
    }
    .map_err(|e| non_finite(step, e, &partial))?;
    let overlap = tape
        .group_overlap(a, &ids, groups)
        .map_err(|e| non_finite(step, e, &partial))?;
    let terms = total_loss(
        &mut tape,
        labels,
        logits_clean,
        logits_inhibited,
        overlap,
        config.alpha,
        config.mu,
    )
    .map_err(|e| non_finite(step, e, &partial))?;

    let report = StepReport {
        step,
        loss_clean: tape.value(terms.clean).item()?,
        loss_inhibited: tape.value(terms.inhibited).item()?,
        loss_orthogonal: tape.value(terms.orthogonal).item()?,
        loss_total: tape.value(terms.total).item()?,
        active_groups,
        importance,
        group_sizes,
    };
    let mut grads = tape.backward(terms.total)?;
    let grads: Vec<Tensor> = params
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is on the loss path"))
        .collect();
    sgd_update(model.params_mut(), &grads, sgd, state).map_err(|e| match e {
        Error::NonFiniteGradient { param, step } => Error::NonFiniteLoss {
            step,
            report: format!("{report:?}; gradient of parameter {param} is non-finite"),
        },
        other => other,
    })?;
    Ok(report)
}

/// Plain cross-entropy step, `L_c(y, D(F(x)))`.
pub fn baseline_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    sgd: &SgdConfig,
    state: &mut SgdState,
) -> Result<StepReport> {
    let step = state.steps;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true)?;
    let x = tape.constant(images.clone())?;
    let a = model
        .forward_features(&mut tape, &params, x)
        .map_err(|e| non_finite(step, e, "baseline"))?;
    let logits = model
        .forward_classifier(&mut tape, &params, a)
        .map_err(|e| non_finite(step, e, "baseline"))?;
    let loss = tape
        .softmax_cross_entropy(logits, labels)
        .map_err(|e| non_finite(step, e, "baseline"))?;
    let report = StepReport::baseline(step, tape.value(loss).item()?);
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = params
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is on the loss path"))
        .collect();
    sgd_update(model.params_mut(), &grads, sgd, state).map_err(|e| match e {
        Error::NonFiniteGradient { param, step } => Error::NonFiniteLoss {
            step,
            report: format!("{report:?}; gradient of parameter {param} is non-finite"),
        },
        other => other,
    })?;
    Ok(report)
}
