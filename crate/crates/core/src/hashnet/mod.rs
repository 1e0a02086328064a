//! Trainable hashing head and its similarity-preserving objective.

mod head;
mod loss;
mod sgd;
mod train;

pub use head::{
    backward, forward, forward_trace, init_params, read_model, write_model, ForwardTrace,
    HashHeadParams, MODEL_MAGIC,
};
pub use loss::{loss, loss_and_grad, loss_grad, partition, LossBreakdown};
pub use sgd::{sgd_step, SgdState};
pub use train::{train, EpochStats, TrainOutcome};

use crate::error::{Error, Result};

/// Hyperparameters of the objective and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Code length in bits.
    pub k: usize,
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the quantization term.
    pub beta: f64,
    /// Contrastive temperature.
    pub gamma: f64,
    /// Similarity threshold separating positives from negatives.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
}

/// Named hyperparameter sets for the contrastive and quantization terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Cifar10,
    NusWide,
    MirFlickr,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" => Ok(Preset::Cifar10),
            "nus-wide" | "nuswide" => Ok(Preset::NusWide),
            "mirflickr" | "mirflickr-25k" => Ok(Preset::MirFlickr),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {s:?} (expected cifar10, nus-wide or mirflickr)"
            ))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 64,
            alpha: 0.2,
            beta: 0.001,
            gamma: 0.2,
            lambda: 0.8,
            lr: 0.006,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch: 128,
            epochs: 30,
            seed: 0,
            hidden: 256,
        }
    }
}

impl TrainConfig {
    /// Overwrites alpha, lambda, gamma and beta with a preset.
    pub fn apply_preset(&mut self, preset: Preset) {
        let (alpha, lambda, gamma, beta) = match preset {
            Preset::Cifar10 => (0.2, 0.8, 0.2, 0.001),
            Preset::NusWide => (0.1, 0.5, 0.2, 0.001),
            Preset::MirFlickr => (0.3, 0.6, 0.5, 0.001),
        };
        self.alpha = alpha;
        self.lambda = lambda;
        self.gamma = gamma;
        self.beta = beta;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.k < 1 {
            return bad("code length k must be at least 1".into());
        }
        if self.hidden < 1 {
            return bad("hidden width must be at least 1".into());
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch));
        }
        Ok(())
    }
}
