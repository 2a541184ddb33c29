use rand::seq::{index, SliceRandom};
use rand_distr::{Beta, Distribution};

use super::mlp::MlpParams;
use super::objective::{accumulate, Batch, Weights, Workspace};
use super::TrainConfig;
use crate::dataset::FeatureStore;
use crate::error::LearnerError;
use crate::inference::LabelState;
use crate::rng::{self, Rng};

pub fn to_f64_rows(
    features: &FeatureStore,
    items: impl IntoIterator<Item = usize>,
) -> Vec<Vec<f64>> {
    items
        .into_iter()
        .map(|i| features.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Probabilities for every row of `features`.
pub fn predict_all(p: &MlpParams, features: &FeatureStore, items: &[usize]) -> Vec<Vec<f64>> {
    crate::par::map(items, |&i| {
        let x: Vec<f64> = features.row(i).iter().map(|&v| f64::from(v)).collect();
        p.forward(&x)
    })
}

/// Items whose largest posterior exceeds `1 - tau`, with their argmax label.
pub fn select_pseudo_labels(labels: &[LabelState], tau: f64) -> Vec<(usize, usize)> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.max_prob() > 1.0 - tau)
        .map(|(i, l)| (i, l.aggregated))
        .collect()
}

struct Sgd {
    params: MlpParams,
    grad: Vec<f64>,
    ws: Workspace,
    lr: f64,
    weights: Weights,
}

impl Sgd {
    fn new(params: MlpParams, cfg: &TrainConfig, mu: f64) -> Self {
        let grad = vec![0.0; params.theta().len()];
        let ws = Workspace::new(&params);
        Self {
            params,
            grad,
            ws,
            lr: cfg.learning_rate(),
            weights: Weights {
                mu,
                weight_decay: cfg.weight_decay,
            },
        }
    }

    fn step(&mut self, batch: &Batch<'_>) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        accumulate(
            &self.params,
            batch,
            self.weights,
            &mut self.ws,
            &mut self.grad,
        );
        for (t, g) in self.params.theta_mut().iter_mut().zip(&self.grad) {
            *t -= self.lr * g;
        }
    }
}

fn init_params(dim: usize, classes: usize, cfg: &TrainConfig) -> MlpParams {
    let mut r = rng::stream(cfg.seed, "learner.init");
    MlpParams::init(dim, cfg.hidden_dim, classes, &mut r)
}

/// Cross-entropy training from a fresh seeded initialization.
/// `train` pairs item indices with hard targets.
pub fn fit(
    features: &FeatureStore,
    classes: usize,
    train: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<MlpParams, LearnerError> {
    if train.is_empty() {
        return Err(LearnerError::EmptyTrainSet);
    }
    let xs = to_f64_rows(features, train.iter().map(|&(i, _)| i));
    let ys: Vec<usize> = train.iter().map(|&(_, y)| y).collect();
    let mut sgd = Sgd::new(init_params(features.dim(), classes, cfg), cfg, 0.0);
    let mut shuffle = rng::stream(cfg.seed, "learner.shuffle");
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut by = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &o in chunk {
                bx.push(&xs[o]);
                by.push(ys[o]);
            }
            sgd.step(&Batch {
                labeled_x: &bx,
                labeled_y: &by,
                ..Batch::default()
            });
        }
    }
    Ok(sgd.params)
}

/// `max(lambda, 1 - lambda)`: the first element of a mixed pair always
/// carries at least half the weight.
pub fn mixing_weight(lambda: f64) -> f64 {
    lambda.max(1.0 - lambda)
}

pub fn mix_pair(
    x1: &[f64],
    p1: &[f64],
    x2: &[f64],
    p2: &[f64],
    weight: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, v)| weight * u + (1.0 - weight) * v)
            .collect()
    };
    (mix(x1, x2), mix(p1, p2))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixedBatch {
    pub x: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

fn mix_into(
    labeled: &[(&[f64], &[f64])],
    unlabeled: &[(&[f64], &[f64])],
    beta: &Beta<f64>,
    rng: &mut Rng,
    out: &mut MixedBatch,
) {
    out.x.clear();
    out.p.clear();
    out.weights.clear();
    if labeled.is_empty() {
        return;
    }
    for (n, (x2, p2)) in unlabeled.iter().enumerate() {
        let (x1, p1) = labeled[n % labeled.len()];
        let w = mixing_weight(beta.sample(rng));
        let (x, p) = mix_pair(x1, p1, x2, p2, w);
        out.x.push(x);
        out.p.push(p);
        out.weights.push(w);
    }
}

/// Mixes every unlabeled pair with a labeled pair (cycled in order) using
/// weights `max(l, 1-l)` with `l ~ Beta(mix_alpha, mix_alpha)`.
pub fn mixmatch_batch(
    labeled: &[(Vec<f64>, Vec<f64>)],
    unlabeled: &[(Vec<f64>, Vec<f64>)],
    mix_alpha: f64,
    seed: u64,
) -> MixedBatch {
    let beta = Beta::new(mix_alpha, mix_alpha).expect("mix_alpha must be positive");
    let mut r = rng::stream(seed, "learner.mix");
    let l: Vec<(&[f64], &[f64])> = labeled.iter().map(|(x, p)| (&x[..], &p[..])).collect();
    let u: Vec<(&[f64], &[f64])> = unlabeled.iter().map(|(x, p)| (&x[..], &p[..])).collect();
    let mut out = MixedBatch::default();
    mix_into(&l, &u, &beta, &mut r, &mut out);
    out
}

/// Cross-entropy on `labeled` plus `mu` times the L2 consistency on inputs
/// mixed between labeled items and confident unlabeled items. Each epoch
/// draws `min(gamma * |labeled|, |unlabeled|)` unlabeled items and spreads
/// them over the labeled mini-batches.
pub fn fit_mixmatch(
    features: &FeatureStore,
    classes: usize,
    labeled: &[(usize, usize)],
    unlabeled: &[(usize, Vec<f64>)],
    cfg: &TrainConfig,
) -> Result<MlpParams, LearnerError> {
    if labeled.is_empty() {
        return Err(LearnerError::EmptyTrainSet);
    }
    if unlabeled.is_empty() || cfg.mu == 0.0 {
        return fit(features, classes, labeled, cfg);
    }
    let xs = to_f64_rows(features, labeled.iter().map(|&(i, _)| i));
    let ys: Vec<usize> = labeled.iter().map(|&(_, y)| y).collect();
    let onehots: Vec<Vec<f64>> = ys
        .iter()
        .map(|&y| {
            (0..classes)
                .map(|c| if c == y { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let uxs = to_f64_rows(features, unlabeled.iter().map(|(i, _)| *i));

    let beta = Beta::new(cfg.mix_alpha, cfg.mix_alpha).expect("mix_alpha validated upstream");
    let mut sgd = Sgd::new(init_params(features.dim(), classes, cfg), cfg, cfg.mu);
    let mut shuffle = rng::stream(cfg.seed, "learner.shuffle");
    let mut mix_rng = rng::stream(cfg.seed, "learner.mix");
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let n_steps = xs.len().div_ceil(cfg.batch_size);
    let n_mixed = (cfg.gamma * xs.len()).min(uxs.len());
    let per_step = n_mixed.div_ceil(n_steps);

    let mut mixed = MixedBatch::default();
    let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut by = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let drawn = index::sample(&mut mix_rng, uxs.len(), n_mixed).into_vec();
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            bx.clear();
            by.clear();
            let mut lpairs = Vec::with_capacity(chunk.len());
            for &o in chunk {
                bx.push(&xs[o]);
                by.push(ys[o]);
                lpairs.push((&xs[o][..], &onehots[o][..]));
            }
            let lo = (s * per_step).min(drawn.len());
            let hi = ((s + 1) * per_step).min(drawn.len());
            let upairs: Vec<(&[f64], &[f64])> = drawn[lo..hi]
                .iter()
                .map(|&u| (&uxs[u][..], &unlabeled[u].1[..]))
                .collect();
            mix_into(&lpairs, &upairs, &beta, &mut mix_rng, &mut mixed);
            sgd.step(&Batch {
                labeled_x: &bx,
                labeled_y: &by,
                mixed_x: &mixed.x,
                mixed_p: &mixed.p,
            });
        }
    }
    Ok(sgd.params)
}
