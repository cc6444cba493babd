use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::{LossWeights, PyramidSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Pyramid-pooled MSE on the reviewed feature maps.
    #[default]
    Hcl,
    ChannelKl,
    SpatialKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Total iterations `K`.
    pub total_iters: u64,
    pub poly_power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            poly_power: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub weights: LossWeights,
    /// Per-stage PEA toggles, shallow to deep.
    pub pea_stages: Vec<bool>,
    pub fusion: FusionConfig,
    pub pyramid: PyramidSpec,
    pub loss_mode: LossMode,
    /// Temperature of the KL feature losses.
    pub kl_temperature: f64,
    /// Weight of the optional logit-distillation term; 0 disables it.
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pea_stages: vec![true; 4],
            fusion: FusionConfig::default(),
            pyramid: PyramidSpec::default(),
            loss_mode: LossMode::Hcl,
            kl_temperature: 4.0,
            kd_weight: 0.0,
            kd_temperature: 4.0,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 2,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, stages: usize) -> Result<()> {
        self.weights.validate(stages)?;
        if self.pea_stages.len() != stages {
            return Err(Error::Config(format!(
                "pea_stages needs {stages} entries, got {}",
                self.pea_stages.len()
            )));
        }
        self.fusion.validate()?;
        self.pyramid.validate()?;
        let o = &self.optimizer;
        if !(o.base_lr >= 0.0 && o.base_lr.is_finite()) || o.weight_decay < 0.0 || o.eps <= 0.0 {
            return Err(Error::Config("optimizer needs base_lr >= 0, weight_decay >= 0, eps > 0".into()));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", o.betas)));
        }
        if self.schedule.poly_power < 0.0 || !self.schedule.poly_power.is_finite() {
            return Err(Error::Config("poly_power must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, t) in [("kl_temperature", self.kl_temperature), ("kd_temperature", self.kd_temperature)] {
            if t <= 0.0 || !t.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        if self.kd_weight < 0.0 || !self.kd_weight.is_finite() {
            return Err(Error::Config("kd_weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}
