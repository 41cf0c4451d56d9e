//! Experiment configuration: a versioned TOML file with dotted-path
//! overrides.
//!
//! ```toml
//! schema = 1
//! run_name = "cifar-tenet"
//! method = "tenet"
//! seeds = [0, 1, 2]
//! output_dir = "runs"
//!
//! [data]
//! train = "data/cifar-10-batches-bin"
//! test = "data/cifar-10-batches-bin/test_batch.bin"
//! format = "cifar10-binary"
//! train_limit = 5000
//!
//! [optim]
//! epochs = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convnet::ModelSpec;
use crate::data::DatasetFormat;
use crate::error::{Error, Result};
use crate::optim::SgdConfig;
use crate::robustness::{AttackConfig, CorruptionSpec};
use crate::tenet::TenetConfig;

pub const CONFIG_SCHEMA: u32 = 1;

/// Environment variable that, when set, replaces `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "TENET_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Tenet,
    /// Plain cross-entropy training.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub format: DatasetFormat,
    /// Keep only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Samples per class drawn from the training set (after `train_limit`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spc: Option<usize>,
    /// Trailing training samples held out for best-checkpoint selection;
    /// 0 selects on the test set.
    #[serde(default)]
    pub val_size: usize,
    /// Per-epoch clean evaluation uses only the first `n` samples of each
    /// split; the final evaluation always uses the whole test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_eval_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f32,
    /// Global gradient-norm cap applied to every update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f32>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            epochs: 20,
            batch_size: 64,
            milestones: Vec::new(),
            gamma: 0.1,
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    /// SGD settings in effect during `epoch` (0-based).
    pub fn sgd_for_epoch(&self, epoch: usize) -> SgdConfig {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        SgdConfig {
            lr: self.lr * self.gamma.powi(decays as i32),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub run_name: String,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub tenet: TenetConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
    /// Seed for attack starts and corruption noise during evaluation.
    #[serde(default)]
    pub eval_seed: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides (dotted paths, TOML
    /// values with a bare-string fallback) and validates the result.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_with(&text, overrides)?;
        if let Some(base) = path.parent() {
            for p in [&mut config.data.train, &mut config.data.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema {}, expected {CONFIG_SCHEMA}",
                self.schema
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_name '{}'", self.run_name)));
        }
        self.tenet.validate()?;
        self.model.trace_shapes()?;
        for a in &self.attacks {
            a.validate()?;
        }
        for c in &self.corruptions {
            c.validate()?;
        }
        Ok(())
    }

    /// `output_dir`, or the value of [`OUTPUT_ROOT_ENV`] when set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    /// Directory of the run for `seed`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_root().join(format!("{}-seed{seed}", self.run_name))
    }

    /// Tenet settings actually used for training: all-zero weights for the
    /// baseline method.
    pub fn effective_tenet(&self) -> TenetConfig {
        match self.method {
            Method::Tenet => self.tenet.clone(),
            Method::Baseline => TenetConfig {
                alpha: 0.0,
                mu: 0.0,
                ..self.tenet.clone()
            },
        }
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
