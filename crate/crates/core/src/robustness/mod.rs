//! Adversarial attacks, image corruptions and robustness metrics.

mod attack;
mod corruption;
mod eval;

pub use attack::{attack, fgsm, input_gradient, pgd, AttackConfig, AttackKind};
pub use corruption::{corrupt, corrupt_with, CorruptionKind, CorruptionSpec, SeverityTable, SEVERITY_TABLE_SOURCE};
pub use eval::{evaluate, mce, mce_from_errors, Condition, EvalMetrics};
