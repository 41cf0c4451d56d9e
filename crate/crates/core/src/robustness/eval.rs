//! Top-1 error under clean, attacked and corrupted inputs.

use std::fmt;

use crate::convnet::{argmax_rows, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tenet::sample_seed;

use super::attack::{attack, AttackConfig};
use super::corruption::{corrupt, CorruptionSpec};

const EVAL_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Clean,
    Attack(AttackConfig),
    Corrupt(CorruptionSpec),
}

impl Condition {
    /// `clean`, `attack:kind:eps:steps` or `corrupt:kind:severity`.
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Attack(a) => a.label(),
            Condition::Corrupt(c) => c.label(),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1_error: f64,
    /// Error per class; `None` for classes absent from the dataset.
    pub per_class_error: Vec<Option<f64>>,
    pub n_samples: usize,
    pub predictions: Vec<usize>,
}

impl EvalMetrics {
    fn from_predictions(predictions: Vec<usize>, labels: &[usize], num_classes: usize) -> Self {
        let mut wrong = vec![0usize; num_classes];
        let mut seen = vec![0usize; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            seen[y] += 1;
            wrong[y] += usize::from(p != y);
        }
        let total_wrong: usize = wrong.iter().sum();
        Self {
            top1_error: total_wrong as f64 / labels.len() as f64,
            per_class_error: wrong
                .iter()
                .zip(&seen)
                .map(|(&w, &s)| (s > 0).then(|| w as f64 / s as f64))
                .collect(),
            n_samples: labels.len(),
            predictions,
        }
    }
}

/// Classifies every sample of `dataset` under `condition`. Attacks run on
/// the plain classification loss; `seed` drives PGD starts and corruption
/// noise, with one derived seed per batch.
pub fn evaluate(model: &Model, dataset: &Dataset, condition: &Condition, seed: u64) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let mut predictions = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for (b, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let (x, labels) = dataset.batch(chunk);
        let batch_seed = sample_seed(seed, b);
        let x = match condition {
            Condition::Clean => x,
            Condition::Attack(cfg) => attack(model, &x, &labels, cfg, batch_seed)?,
            Condition::Corrupt(spec) => corrupt(&x, spec, batch_seed)?,
        };
        predictions.extend(argmax_rows(&model.logits(&x)?));
    }
    Ok(EvalMetrics::from_predictions(
        predictions,
        dataset.labels(),
        dataset.num_classes(),
    ))
}

/// Unnormalized mean of top-1 errors over a suite of corruption cells.
pub fn mce_from_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("mCE needs a non-empty corruption suite".into()));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Evaluates every corruption cell of `suite` and returns the per-cell
/// metrics together with their mean error.
pub fn mce(
    model: &Model,
    dataset: &Dataset,
    suite: &[CorruptionSpec],
    seed: u64,
) -> Result<(f64, Vec<(CorruptionSpec, EvalMetrics)>)> {
    let cells = suite
        .iter()
        .map(|spec| evaluate(model, dataset, &Condition::Corrupt(*spec), seed).map(|m| (*spec, m)))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = cells.iter().map(|(_, m)| m.top1_error).collect();
    Ok((mce_from_errors(&errors)?, cells))
}
