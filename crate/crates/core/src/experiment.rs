//! Training runs: one directory per seed holding the effective config,
//! per-step and per-epoch metrics, checkpoints and final evaluations.
//!
//! ```text
//! <output_root>/<run_name>-seed<k>/
//!     config.toml       effective config, `seeds = [k]`
//!     metrics.csv       one row per step, then per epoch one row per eval split
//!     last.ckpt         end of the latest completed epoch
//!     best.ckpt         lowest clean error on the selection split
//!     eval.csv          final clean / attack / corruption errors
//!     predictions.csv   per-sample predictions behind eval.csv
//!     nan_abort.json    only when training hit a non-finite loss
//! ```

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::convnet::Model;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::optim::SgdState;
use crate::robustness::{evaluate, Condition, EvalMetrics};
use crate::tenet::{baseline_step, sample_seed, tenet_step, StepReport};

const SHUFFLE_SALT: u64 = 0x5EED_5AFF_1E00_0001;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const NAN_FILE: &str = "nan_abort.json";

/// One line of `metrics.csv`: either a training step or an epoch-end
/// evaluation on one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// `step` or `eval`.
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub l_c_clean: Option<f32>,
    pub l_c_inhibited: Option<f32>,
    pub l_o: Option<f32>,
    pub l_total: Option<f32>,
    pub active_groups: Option<f32>,
    /// Importance scores, descending, `;`-joined.
    pub importance: Option<String>,
    pub split: Option<String>,
    pub top1_error: Option<f64>,
}

impl MetricsRow {
    fn from_step(epoch: usize, r: &StepReport) -> Self {
        let rec = r.csv_record();
        Self {
            kind: "step".into(),
            epoch,
            step: r.step,
            l_c_clean: Some(r.loss_clean),
            l_c_inhibited: Some(r.loss_inhibited),
            l_o: Some(r.loss_orthogonal),
            l_total: Some(r.loss_total),
            active_groups: Some(r.active_groups),
            importance: Some(rec[6].clone()),
            ..Self::default()
        }
    }

    fn from_eval(epoch: usize, step: u64, split: &str, error: f64) -> Self {
        Self {
            kind: "eval".into(),
            epoch,
            step,
            split: Some(split.into()),
            top1_error: Some(error),
            ..Self::default()
        }
    }
}

/// One line of `eval.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub model_checkpoint: String,
    pub condition: String,
    pub n_samples: usize,
    pub top1_error: f64,
}

/// One line of `predictions.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub condition: String,
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train, optional validation and test sets as described by the config.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl Datasets {
    /// Loads and subsets the data; `seed` drives per-class subsampling.
    pub fn load(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let d = &config.data;
        let mut train = load_dataset(&d.train, d.format)?;
        if let Some(n) = d.train_limit {
            train = train.take(n);
        }
        if let Some(spc) = d.spc {
            train = train.subsample_per_class(spc, seed)?;
        }
        let val = if d.val_size > 0 {
            if d.val_size >= train.len() {
                return Err(Error::Config(format!(
                    "val_size {} leaves no training data ({} samples)",
                    d.val_size,
                    train.len()
                )));
            }
            let cut = train.len() - d.val_size;
            let val = train.select(&(cut..train.len()).collect::<Vec<_>>());
            train = train.take(cut);
            Some(val)
        } else {
            None
        };
        let mut test = load_dataset(&d.test, d.format)?;
        if let Some(n) = d.test_limit {
            test = test.take(n);
        }
        let want = config.model.input;
        for (name, ds) in [("train", &train), ("test", &test)] {
            if ds.image_shape() != want {
                return Err(Error::Config(format!(
                    "{name} images are {:?}, model expects {want:?}",
                    ds.image_shape()
                )));
            }
            if ds.num_classes() > config.model.num_classes {
                return Err(Error::Config(format!(
                    "{name} set has {} classes, model has {}",
                    ds.num_classes(),
                    config.model.num_classes
                )));
            }
        }
        Ok(Self { train, val, test })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` when present instead of starting over.
    pub resume: bool,
    /// Return after this many optimizer updates in total (simulates an
    /// interruption; the partial epoch is not checkpointed).
    pub stop_after_steps: Option<u64>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub epochs_completed: usize,
    /// Whether every epoch and the final evaluation finished.
    pub complete: bool,
    pub eval: Vec<EvalRow>,
}

/// Trains one run per configured seed.
pub fn train(config: &ExperimentConfig, options: &TrainOptions) -> Result<Vec<RunSummary>> {
    config.validate()?;
    config.seeds.iter().map(|&seed| train_seed(config, seed, options)).collect()
}

/// Trains and evaluates the run for one seed.
pub fn train_seed(config: &ExperimentConfig, seed: u64, options: &TrainOptions) -> Result<RunSummary> {
    let data = Datasets::load(config, seed)?;
    train_on(config, seed, &data, options)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed ^ SHUFFLE_SALT, epoch)));
    order
}

/// As [`train_seed`] with already loaded data.
pub fn train_on(config: &ExperimentConfig, seed: u64, data: &Datasets, options: &TrainOptions) -> Result<RunSummary> {
    let run_dir = config.run_dir(seed);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let snapshot = ExperimentConfig {
        seeds: vec![seed],
        ..config.clone()
    };
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, snapshot.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let last_path = run_dir.join(LAST_CKPT);
    let metrics_path = run_dir.join(METRICS_FILE);
    let (mut model, mut state, start_epoch, mut best) = if options.resume && last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        if ckpt.model.spec() != &config.model {
            return Err(Error::Config("checkpoint model spec differs from config".into()));
        }
        (ckpt.model, ckpt.optimizer, ckpt.epoch, ckpt.best_val_error)
    } else {
        (Model::init(config.model.clone(), seed)?, SgdState::default(), 0, None)
    };

    // Rows from an interrupted epoch are dropped and regenerated.
    let kept: Vec<MetricsRow> = if options.resume && metrics_path.exists() && start_epoch > 0 {
        read_csv::<MetricsRow>(&metrics_path)?
            .into_iter()
            .filter(|r| r.epoch < start_epoch)
            .collect()
    } else {
        Vec::new()
    };
    write_csv(&metrics_path, &kept)?;
    let file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = csv::WriterBuilder::new().has_headers(kept.is_empty()).from_writer(file);

    let tenet = config.effective_tenet();
    let batch = config.optim.batch_size;
    let mut stopped = false;
    for epoch in start_epoch..config.optim.epochs {
        let sgd = config.optim.sgd_for_epoch(epoch);
        let order = epoch_order(data.train.len(), seed, epoch);
        let mut last_loss = 0.0;
        for chunk in order.chunks(batch) {
            if options.stop_after_steps.is_some_and(|s| state.steps >= s) {
                stopped = true;
                break;
            }
            let (x, y) = data.train.batch(chunk);
            let step_seed = sample_seed(seed, state.steps as usize);
            let result = match config.method {
                Method::Tenet => tenet_step(&mut model, &x, &y, &tenet, &sgd, &mut state, step_seed),
                Method::Baseline => baseline_step(&mut model, &x, &y, &sgd, &mut state),
            };
            let report = match result {
                Ok(r) => r,
                Err(err @ Error::NonFiniteLoss { .. }) => {
                    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                    let diag = serde_json::json!({
                        "epoch": epoch,
                        "step": state.steps,
                        "error": err.to_string(),
                    });
                    let nan_path = run_dir.join(NAN_FILE);
                    fs::write(&nan_path, serde_json::to_vec_pretty(&diag)?).map_err(|e| Error::io(&nan_path, e))?;
                    return Err(err);
                }
                Err(other) => return Err(other),
            };
            last_loss = report.loss_total;
            metrics.serialize(MetricsRow::from_step(epoch, &report))?;
        }
        if stopped {
            break;
        }
        let selection_error = {
            let limit = config.data.epoch_eval_limit.unwrap_or(usize::MAX);
            let mut sel = None;
            if let Some(val) = &data.val {
                let e = evaluate(&model, &val.take(limit), &Condition::Clean, 0)?.top1_error;
                metrics.serialize(MetricsRow::from_eval(epoch, state.steps, "val", e))?;
                sel = Some(e);
            }
            let e = evaluate(&model, &data.test.take(limit), &Condition::Clean, 0)?.top1_error;
            metrics.serialize(MetricsRow::from_eval(epoch, state.steps, "test", e))?;
            sel.unwrap_or(e)
        };
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let improved = best.is_none_or(|b| selection_error < b);
        if improved {
            best = Some(selection_error);
        }
        let ckpt = Checkpoint {
            model: model.clone(),
            optimizer: state.clone(),
            epoch: epoch + 1,
            best_val_error: best,
        };
        if improved {
            ckpt.save(&run_dir.join(BEST_CKPT))?;
        }
        ckpt.save(&last_path)?;
        if options.verbose {
            eprintln!(
                "[{}] epoch {}/{} step {} loss {last_loss:.4} clean error {selection_error:.4}",
                run_dir.display(),
                epoch + 1,
                config.optim.epochs,
                state.steps
            );
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(metrics);

    let epochs_completed = if stopped {
        Checkpoint::load(&last_path).map(|c| c.epoch).unwrap_or(0)
    } else {
        config.optim.epochs
    };
    let eval = if stopped {
        Vec::new()
    } else {
        evaluate_run(&model, &data.test, config, &run_id(config, seed), LAST_CKPT, &run_dir)?
    };
    Ok(RunSummary {
        run_dir,
        seed,
        steps: state.steps,
        epochs_completed,
        complete: !stopped,
        eval,
    })
}

pub fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    format!("{}-seed{seed}", config.run_name)
}

/// Every condition evaluated at the end of a run: clean, each attack, each
/// corruption.
pub fn conditions(config: &ExperimentConfig) -> Vec<Condition> {
    std::iter::once(Condition::Clean)
        .chain(config.attacks.iter().map(|a| Condition::Attack(*a)))
        .chain(config.corruptions.iter().map(|c| Condition::Corrupt(*c)))
        .collect()
}

/// Evaluates `model` under every configured condition and writes
/// `eval.csv` and `predictions.csv` into `out_dir`.
pub fn evaluate_run(
    model: &Model,
    test: &Dataset,
    config: &ExperimentConfig,
    run_id: &str,
    checkpoint: &str,
    out_dir: &Path,
) -> Result<Vec<EvalRow>> {
    let results = conditions(config)
        .into_iter()
        .map(|c| evaluate(model, test, &c, config.eval_seed).map(|m| (c, m)))
        .collect::<Result<Vec<_>>>()?;
    write_eval_outputs(&results, test, run_id, checkpoint, out_dir)
}

/// Writes `eval.csv` and `predictions.csv` for already computed metrics.
pub fn write_eval_outputs(
    results: &[(Condition, EvalMetrics)],
    test: &Dataset,
    run_id: &str,
    checkpoint: &str,
    out_dir: &Path,
) -> Result<Vec<EvalRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<EvalRow> = results
        .iter()
        .map(|(c, m)| EvalRow {
            run_id: run_id.to_string(),
            model_checkpoint: checkpoint.to_string(),
            condition: c.label(),
            n_samples: m.n_samples,
            top1_error: m.top1_error,
        })
        .collect();
    let predictions: Vec<PredictionRow> = results
        .iter()
        .flat_map(|(c, m)| {
            let label = c.label();
            m.predictions
                .iter()
                .zip(test.labels())
                .enumerate()
                .map(move |(index, (&prediction, &y))| PredictionRow {
                    condition: label.clone(),
                    index,
                    label: y,
                    prediction,
                })
        })
        .collect();
    write_csv(&out_dir.join(EVAL_FILE), &rows)?;
    write_csv(&out_dir.join(PREDICTIONS_FILE), &predictions)?;
    Ok(rows)
}
