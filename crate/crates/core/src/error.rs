use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite gradient for parameter {param} at step {step}")]
    NonFiniteGradient { param: usize, step: u64 },

    #[error("tape already consumed by a backward pass; call reset() first")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {format} data at byte offset {offset}: {detail}")]
    Malformed {
        format: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: u64, report: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::TapeConsumed => "tape_consumed",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Malformed { .. } => "malformed",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
