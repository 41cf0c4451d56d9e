//! Group-wise inhibition feature regularization for small convolutional
//! networks, with the supporting autodiff engine, adversarial attacks,
//! image corruptions and experiment tooling.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod convnet;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod optim;
pub mod pnm;
pub mod report;
pub mod robustness;
pub mod tensor;
pub mod tenet;

pub use autodiff::{Gradients, Tape, Var};
pub use convnet::{LayerSpec, Model, ModelSpec};
pub use error::{Error, Result};
pub use tensor::Tensor;
