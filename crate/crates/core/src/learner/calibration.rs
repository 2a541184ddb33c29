use super::mlp::{log_softmax_scaled, MlpParams};
use super::train::to_f64_rows;
use crate::dataset::FeatureStore;
use crate::error::LearnerError;
use crate::inference::argmax;

const LOG_T_MIN: f64 = -3.0;
const LOG_T_MAX: f64 = 3.0;
const LOG_T_TOL: f64 = 1e-3;

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| -log_softmax_scaled(l, t)[y])
        .sum();
    total / logits.len() as f64
}

/// Golden-section search for the NLL-minimizing temperature over
/// `log t ∈ [-3, 3]`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, LearnerError> {
    if logits.is_empty() {
        return Err(LearnerError::EmptyValidationSet);
    }
    let f = |log_t: f64| nll_at_temperature(logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_MIN, LOG_T_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok((0.5 * (a + b)).exp())
}

fn raw_logits(p: &MlpParams, features: &FeatureStore, val: &[(usize, usize)]) -> Vec<Vec<f64>> {
    to_f64_rows(features, val.iter().map(|&(i, _)| i))
        .iter()
        .map(|x| p.logits(x))
        .collect()
}

/// Sets the temperature minimizing NLL on the clean validation items.
/// Predicted classes are unchanged.
pub fn calibrate_temperature(
    p: MlpParams,
    features: &FeatureStore,
    val: &[(usize, usize)],
) -> Result<MlpParams, LearnerError> {
    let logits = raw_logits(&p, features, val);
    let labels: Vec<usize> = val.iter().map(|&(_, y)| y).collect();
    let t = fit_temperature(&logits, &labels)?;
    Ok(p.with_temperature(t))
}

/// NLL on the validation items at the model's own temperature.
pub fn validation_loss(
    p: &MlpParams,
    features: &FeatureStore,
    val: &[(usize, usize)],
) -> Result<f64, LearnerError> {
    if val.is_empty() {
        return Err(LearnerError::EmptyValidationSet);
    }
    let logits = raw_logits(p, features, val);
    let labels: Vec<usize> = val.iter().map(|&(_, y)| y).collect();
    Ok(nll_at_temperature(&logits, &labels, p.temperature()))
}

pub fn validation_accuracy(
    p: &MlpParams,
    features: &FeatureStore,
    val: &[(usize, usize)],
) -> Result<f64, LearnerError> {
    if val.is_empty() {
        return Err(LearnerError::EmptyValidationSet);
    }
    let logits = raw_logits(p, features, val);
    let hits = logits
        .iter()
        .zip(val)
        .filter(|(l, &(_, y))| argmax(l) == y)
        .count();
    Ok(hits as f64 / val.len() as f64)
}

/// Best model seen so far and its validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Incumbent {
    pub params: MlpParams,
    pub loss: f64,
}

/// The candidate replaces the incumbent when its loss is not worse.
pub fn keep_candidate(candidate_loss: f64, best_loss: f64) -> bool {
    candidate_loss <= best_loss
}

/// Global model selection. Returns the retained model and whether the
/// candidate replaced the incumbent. With no incumbent the best loss is +inf.
pub fn select_model(
    candidate: MlpParams,
    incumbent: Option<Incumbent>,
    features: &FeatureStore,
    val: &[(usize, usize)],
) -> Result<(Incumbent, bool), LearnerError> {
    let loss = validation_loss(&candidate, features, val)?;
    let best_loss = incumbent.as_ref().map_or(f64::INFINITY, |i| i.loss);
    if keep_candidate(loss, best_loss) {
        Ok((
            Incumbent {
                params: candidate,
                loss,
            },
            true,
        ))
    } else {
        Ok((
            incumbent.expect("finite best loss implies an incumbent"),
            false,
        ))
    }
}
