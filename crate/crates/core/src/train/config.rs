use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerKind};
use crate::error::{DfgError, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Original,
    Finetune,
    #[default]
    Dfg,
}

impl std::str::FromStr for TrainMode {
    type Err = DfgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(TrainMode::Original),
            "finetune" => Ok(TrainMode::Finetune),
            "dfg" => Ok(TrainMode::Dfg),
            other => Err(DfgError::Config(format!(
                "unknown mode `{other}` (expected original, finetune or dfg)"
            ))),
        }
    }
}

/// Training hyperparameters. Defaults are the LeNet recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Gradient-penalty coefficient.
    pub lambda: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    /// Period of the generator/extractor/classifier-on-real updates.
    pub n_c1: usize,
    /// Period of the full classifier update.
    pub n_c2: usize,
    /// Period of the filter-weight refresh.
    pub n_w: usize,
    /// Share of the source model in blended filter weights.
    pub rho: f64,
    /// Mask cut-off as a fraction of each class's mean weight.
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Update rule for the extractor and classifier.
    pub ec_optimizer: OptimizerKind,
    pub sgd_momentum: f64,
    /// Start-point regularizer strength; 0 disables it.
    pub kappa_sp: f64,
    pub z_dim: usize,
    /// Samples in the stratified set used for filter ablation.
    pub calibration_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Dfg,
            iterations: 20_000,
            batch_size: 64,
            seed: 0,
            lambda: 10.0,
            n_critic: 5,
            n_c1: 2,
            n_c2: 10,
            n_w: 5000,
            rho: 0.75,
            delta: 0.95,
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            lr_extractor: 2e-5,
            lr_classifier: 2e-5,
            lr_generator: 2e-4,
            lr_critic: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            ec_optimizer: OptimizerKind::Adam,
            sgd_momentum: 0.9,
            kappa_sp: 0.0,
            z_dim: 100,
            calibration_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(DfgError::Config(format!("`{key}` {why}")));
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("n_critic", self.n_critic),
            ("n_c1", self.n_c1),
            ("n_c2", self.n_c2),
            ("n_w", self.n_w),
            ("z_dim", self.z_dim),
            ("calibration_size", self.calibration_size),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        for (key, v) in [
            ("lr_extractor", self.lr_extractor),
            ("lr_classifier", self.lr_classifier),
            ("lr_generator", self.lr_generator),
            ("lr_critic", self.lr_critic),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be a positive number");
            }
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", "must lie in [0, 1]");
        }
        if !(self.delta > 0.0) {
            return bad("delta", "must be positive");
        }
        if !(self.kappa_sp >= 0.0) {
            return bad("kappa_sp", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum", "must lie in [0, 1)");
        }
        self.loss_weights().validate()
    }
}
