//! Training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::ResidualPolicy;
use crate::losses::{CycleScope, GpMode, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub r: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// `K = N - k_offset`.
    pub k_offset: i64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { r: 0.75, min_size: 18, max_size: 220, k_offset: 1 }
    }
}

/// Switches for the ablation variants. The defaults give the full method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub cycle_scope: CycleScope,
    /// One generator per domain does both unconditional and conditional work.
    pub shared_cond_uncond: bool,
    pub residual_policy: ResidualPolicy,
    /// Start scale `n` from the weights of scale `n - 1`.
    pub scale_weight_copy: bool,
    /// Feed the conditional generator the upsampled translation of the
    /// previous scale as well.
    pub condition_on_prev_translation: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cycle_scope: CycleScope::All,
            shared_cond_uncond: true,
            residual_policy: ResidualPolicy::Standard,
            scale_weight_copy: true,
            condition_on_prev_translation: false,
        }
    }
}

impl Ablation {
    /// Named variants, each differing from the default in one switch.
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        let d = Ablation::default();
        vec![
            ("no_cycle", Ablation { cycle_scope: CycleScope::None, ..d }),
            ("last_scale_cycle", Ablation { cycle_scope: CycleScope::LastOnly, ..d }),
            ("prev_translation", Ablation { condition_on_prev_translation: true, ..d }),
            ("no_weight_copy", Ablation { scale_weight_copy: false, ..d }),
            ("separate_cond", Ablation { shared_cond_uncond: false, ..d }),
            ("all_residual", Ablation { residual_policy: ResidualPolicy::All, ..d }),
            ("no_residual", Ablation { residual_policy: ResidualPolicy::None, ..d }),
        ]
    }
}

/// `Pair` trains the coupled two-domain model; `Single` trains only the
/// unconditional stack of domain A (the refinement model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Pair,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters_per_scale: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_steps: usize,
    pub g_steps: usize,
    pub seed: u64,
    /// Channels of every hidden layer.
    pub base_channels: usize,
    pub weights: LossWeights,
    pub gp_mode: GpMode,
    pub schedule: ScheduleConfig,
    pub ablation: Ablation,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters_per_scale: 10_000,
            lr: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            d_steps: 3,
            g_steps: 3,
            seed: 0,
            base_channels: 32,
            weights: LossWeights::default(),
            gp_mode: GpMode::Exact,
            schedule: ScheduleConfig::default(),
            ablation: Ablation::default(),
            objective: Objective::Pair,
        }
    }
}

impl TrainConfig {
    /// Small setting that trains three 48 px scales in minutes on one core.
    ///
    /// With only 300 iterations per scale the reconstruction term needs a
    /// larger weight to keep up with the adversarial terms.
    pub fn desk() -> Self {
        Self {
            iters_per_scale: 300,
            d_steps: 1,
            g_steps: 1,
            base_channels: 16,
            weights: LossWeights { lambda_recon: 10.0, ..LossWeights::default() },
            schedule: ScheduleConfig { r: 0.75, min_size: 24, max_size: 48, k_offset: 1 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters_per_scale == 0 || self.d_steps == 0 || self.g_steps == 0 {
            return Err(Error::Config("iteration and step counts must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must be below 2^63".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if let GpMode::FiniteDifference { step } = self.gp_mode {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
            }
        }
        let s = &self.schedule;
        if !(s.r > 0.0 && s.r < 1.0) {
            return Err(Error::Config(format!("r must lie in (0, 1), got {}", s.r)));
        }
        if s.min_size == 0 || s.min_size >= s.max_size {
            return Err(Error::Config(format!("need 0 < min_size < max_size, got {} and {}", s.min_size, s.max_size)));
        }
        self.weights.validate()
    }
}
