use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Two-layer perceptron head `softmax((W2ᵀ relu(W1ᵀx + b1) + b2) / T)`.
///
/// Trainable parameters live in one flat vector laid out as
/// `[w1 (D×H, row per input), b1 (H), w2 (H×K, row per hidden unit), b2 (K)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dim: usize,
    hidden: usize,
    classes: usize,
    theta: Vec<f64>,
    temperature: f64,
}

/// Shape header of a checkpoint; the weights follow as flat float32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub temperature: f64,
    pub layout: Vec<(String, Vec<usize>)>,
}

impl MlpParams {
    pub fn zeros(dim: usize, hidden: usize, classes: usize) -> Self {
        let n = dim * hidden + hidden + hidden * classes + classes;
        Self {
            dim,
            hidden,
            classes,
            theta: vec![0.0; n],
            temperature: 1.0,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init(dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(dim, hidden, classes);
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let split = dim * hidden + hidden;
        for (idx, v) in p.theta.iter_mut().enumerate() {
            let bound = if idx < split { b1 } else { b2 };
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn from_theta(dim: usize, hidden: usize, classes: usize, theta: Vec<f64>) -> Self {
        let mut p = Self::zeros(dim, hidden, classes);
        assert_eq!(
            theta.len(),
            p.theta.len(),
            "parameter vector has the wrong length"
        );
        p.theta = theta;
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        assert!(t > 0.0 && t.is_finite(), "temperature must be positive");
        self.temperature = t;
        self
    }

    pub(crate) fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.dim * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.classes;
        Offsets { w1, b1, w2, b2 }
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o.w1..o.b1]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o.b1..o.w2]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o.w2..o.b2]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o.b2..]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let o = self.offsets();
        &mut self.theta[o.b2..]
    }

    /// Hidden pre-activations and logits at temperature 1.
    pub(crate) fn forward_raw(&self, x: &[f64], pre: &mut [f64], logits: &mut [f64]) {
        let (h, k) = (self.hidden, self.classes);
        let o = self.offsets();
        pre.copy_from_slice(&self.theta[o.b1..o.w2]);
        for (d, &xd) in x.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            let row = &self.theta[o.w1 + d * h..o.w1 + (d + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xd * w;
            }
        }
        logits.copy_from_slice(&self.theta[o.b2..]);
        for (u, &p) in pre.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let row = &self.theta[o.w2 + u * k..o.w2 + (u + 1) * k];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += p * w;
            }
        }
    }

    /// Logits before temperature scaling.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut pre = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        self.forward_raw(x, &mut pre, &mut logits);
        logits
    }

    /// Class probabilities at the stored temperature.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        softmax_scaled(&self.logits(x), self.temperature)
    }

    pub fn checkpoint(&self) -> (CheckpointHeader, Vec<f32>) {
        let header = CheckpointHeader {
            dim: self.dim,
            hidden: self.hidden,
            classes: self.classes,
            temperature: self.temperature,
            layout: vec![
                ("w1".into(), vec![self.dim, self.hidden]),
                ("b1".into(), vec![self.hidden]),
                ("w2".into(), vec![self.hidden, self.classes]),
                ("b2".into(), vec![self.classes]),
            ],
        };
        (header, self.theta.iter().map(|&v| v as f32).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Offsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// `softmax(logits / t)`, computed with max subtraction.
pub fn softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|l| ((l - max) / t).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|l| (l - max) / t - lse).collect()
}
