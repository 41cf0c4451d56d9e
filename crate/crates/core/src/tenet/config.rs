use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How reversed maps are turned into a multiplicative mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `rm_l = [I_l > 0] · σ(−m_l)`; inactive groups are fully suppressed.
    #[default]
    Rrf,
    /// `rm_l = [I_l > 0] · [m_l < mean(m_l)]`.
    Binary,
    /// Like `Rrf` for active groups, but inactive groups pass through (`rm_l = 1`).
    PassthroughInactive,
}

/// What the mask is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// Medoid clustering of channels into `num_groups` groups.
    #[default]
    Group,
    /// Every channel is its own group.
    Channel,
    /// One normalized class-activation map shared by all channels.
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TenetConfig {
    pub num_groups: usize,
    /// Weight of the inhibited-pass cross-entropy.
    pub alpha: f32,
    /// Weight of the orthogonal (group overlap) loss.
    pub mu: f32,
    pub cfg_restarts: usize,
    pub cfg_max_iters: usize,
    pub mask_mode: MaskMode,
    pub grouping_mode: GroupingMode,
    /// Treat the reversed maps as a constant mask in the training backward.
    pub detach_rm: bool,
    /// Fixed cut for the binary mask; `None` splits each map at its mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary_threshold: Option<f32>,
}

impl Default for TenetConfig {
    fn default() -> Self {
        Self {
            num_groups: 6,
            alpha: 0.1,
            mu: 0.1,
            cfg_restarts: 4,
            cfg_max_iters: 20,
            mask_mode: MaskMode::Rrf,
            grouping_mode: GroupingMode::Group,
            detach_rm: true,
            binary_threshold: None,
        }
    }
}

impl TenetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 {
            return Err(Error::Config("num_groups must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and mu must be non-negative (got {}, {})",
                self.alpha, self.mu
            )));
        }
        if self.cfg_restarts == 0 || self.cfg_max_iters == 0 {
            return Err(Error::Config("cfg_restarts and cfg_max_iters must be positive".into()));
        }
        Ok(())
    }

    /// Group count actually used for a map set with `channels` channels.
    pub fn effective_groups(&self, channels: usize) -> usize {
        match self.grouping_mode {
            GroupingMode::Group => self.num_groups,
            GroupingMode::Channel => channels,
            GroupingMode::Instance => 1,
        }
    }
}
