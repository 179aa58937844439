use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weights and optimization schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_rec: f64,
    /// Must be zero unless `adversarial_enabled`.
    pub lambda_adv: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adversarial_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 0.999,
            lambda_adv: 0.0,
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 30,
            seed: 1,
            adversarial_enabled: false,
        }
    }
}

impl TrainConfig {
    /// Adversarial weight used when the adversarial term is switched on
    /// without an explicit weight.
    pub const DEFAULT_LAMBDA_ADV: f64 = 0.001;

    /// Enables the adversarial term with the rec-dominant default weights.
    pub fn with_adversarial(mut self) -> Self {
        self.adversarial_enabled = true;
        self.lambda_adv = Self::DEFAULT_LAMBDA_ADV;
        self
    }

    pub fn effective_lambda_adv(&self) -> f64 {
        if self.adversarial_enabled {
            self.lambda_adv
        } else {
            0.0
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rec > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_rec must be positive, got {}",
                self.lambda_rec
            )));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_adv must be non-negative, got {}",
                self.lambda_adv
            )));
        }
        if !self.adversarial_enabled && self.lambda_adv != 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_adv must be 0 when adversarial training is disabled".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}
