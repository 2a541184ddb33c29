//! The in-loop classifier: an MLP head over fixed features, retrained from
//! scratch every round, with optional semi-supervised objectives,
//! temperature calibration on prototypes and global model selection.

mod calibration;
mod mlp;
pub mod objective;
mod search;
mod train;

use serde::{Deserialize, Serialize};

pub use calibration::{
    calibrate_temperature, fit_temperature, keep_candidate, nll_at_temperature, select_model,
    validation_accuracy, validation_loss, Incumbent,
};
pub use mlp::{log_softmax_scaled, softmax_scaled, CheckpointHeader, MlpParams};
pub use search::{hyperparam_search, HyperGrid};
pub use train::{
    fit, fit_mixmatch, mix_pair, mixing_weight, mixmatch_batch, predict_all, select_pseudo_labels,
    to_f64_rows, MixedBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiMode {
    None,
    Pseudo,
    Mixmatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning-rate ratio; the SGD step is `lr_ratio * batch_size`.
    pub lr_ratio: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden_dim: usize,
    pub semi_mode: SemiMode,
    /// Pseudo-label threshold: keep items whose top posterior exceeds `1 - tau`.
    pub tau: f64,
    /// Weight of the MixMatch L2 term.
    pub mu: f64,
    /// Unlabeled oversampling factor for MixMatch.
    pub gamma: usize,
    /// Beta(a, a) parameter of the MixMatch interpolation weight.
    pub mix_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ratio: 0.001,
            batch_size: 64,
            weight_decay: 0.0005,
            epochs: 30,
            hidden_dim: 128,
            semi_mode: SemiMode::None,
            tau: 0.1,
            mu: 3.0,
            gamma: 50,
            mix_alpha: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr_ratio * self.batch_size as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr_ratio > 0.0) {
            return Err("lr_ratio must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return Err("weight_decay must be non-negative".into());
        }
        if self.hidden_dim == 0 {
            return Err("hidden_dim must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err("tau must lie in (0, 1)".into());
        }
        if !(self.mu >= 0.0) {
            return Err("mu must be non-negative".into());
        }
        if self.gamma == 0 {
            return Err("gamma must be at least 1".into());
        }
        if !(self.mix_alpha > 0.0) {
            return Err("mix_alpha must be positive".into());
        }
        Ok(())
    }
}
