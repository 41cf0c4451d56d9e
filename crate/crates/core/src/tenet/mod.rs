//! Group-wise inhibition: channel grouping, gradient-based group weighting,
//! reversed maps and the regularized training step.

mod config;
mod grouping;
mod inhibition;
mod loss;
mod probe;
mod step;
mod weighting;

pub use config::{GroupingMode, MaskMode, TenetConfig};
pub use grouping::{cfg_distance, cfg_group, FeatureGrouping};
pub use inhibition::{class_activation_map, expand_group_mask, inhibited_forward, reversed_maps, rrf};
pub use loss::{combine_losses, orthogonal_loss, total_loss, LossTerms};
pub use probe::{
    confidence_with_groups_zeroed, group_confidence_on_maps, group_confidence_probe, spearman, ConfidenceProbe,
};
pub use step::{analyze, baseline_step, sample_seed, tenet_step, SampleAnalysis, StepReport};
pub use weighting::{gmw_weights, group_importance, group_maps, ProbeResult};

pub(crate) use inhibition::normalize_min_max;
