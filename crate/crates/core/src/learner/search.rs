use serde::{Deserialize, Serialize};

use super::calibration::validation_accuracy;
use super::train::fit;
use super::{SemiMode, TrainConfig};
use crate::dataset::FeatureStore;
use crate::error::LearnerError;
use crate::par;

/// Hyperparameter search range. The default is the published grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub lr_ratio: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            lr_ratio: vec![0.001, 0.0005, 0.0001, 0.00005],
            weight_decay: vec![0.001, 0.005, 0.0005, 0.0001],
            mu: vec![3.0, 5.0, 10.0],
            gamma: vec![50, 75, 100, 150],
        }
    }
}

impl HyperGrid {
    /// Cartesian product over `base`, in row-major order of
    /// (lr_ratio, weight_decay, mu, gamma). The MixMatch axes only expand
    /// when `base` trains with MixMatch.
    pub fn lattice(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mixmatch = base.semi_mode == SemiMode::Mixmatch;
        let mus = if mixmatch {
            self.mu.clone()
        } else {
            vec![base.mu]
        };
        let gammas = if mixmatch {
            self.gamma.clone()
        } else {
            vec![base.gamma]
        };
        let mut out = vec![];
        for &lr_ratio in &self.lr_ratio {
            for &weight_decay in &self.weight_decay {
                for &mu in &mus {
                    for &gamma in &gammas {
                        out.push(TrainConfig {
                            lr_ratio,
                            weight_decay,
                            mu,
                            gamma,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Exhaustive search: fits each lattice point on the training prototypes
/// and keeps the one with the best validation-prototype accuracy (first in
/// lattice order on ties).
pub fn hyperparam_search(
    lattice: &[TrainConfig],
    features: &FeatureStore,
    classes: usize,
    train_protos: &[(usize, usize)],
    val_protos: &[(usize, usize)],
) -> Result<TrainConfig, LearnerError> {
    if lattice.is_empty() {
        return Err(LearnerError::EmptyGrid);
    }
    let scores = par::map(lattice, |cfg| {
        let p = fit(features, classes, train_protos, cfg)?;
        validation_accuracy(&p, features, val_protos)
    });
    let mut best: Option<(usize, f64)> = None;
    for (idx, score) in scores.into_iter().enumerate() {
        let score = score?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((idx, score));
        }
    }
    let (idx, acc) = best.expect("lattice is non-empty");
    log::debug!("hyperparameter search picked lattice point {idx} (val accuracy {acc:.3})");
    Ok(lattice[idx].clone())
}
