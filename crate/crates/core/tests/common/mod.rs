//! Test oracles shared by the integration suites. Everything here is
//! computed independently of the library code it is compared against.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdloop_core::inference::Confusion;
use crowdloop_core::learner::objective::{loss, loss_and_grad, Batch, Weights};
use crowdloop_core::learner::MlpParams;

pub fn uniform(n: usize, k: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / k as f64; k]; n]
}

/// Plurality vote, lowest class index on ties. Empty input votes for 0.
pub fn plurality(labels: impl IntoIterator<Item = usize>, k: usize) -> usize {
    let mut votes = vec![0usize; k];
    for z in labels {
        votes[z] += 1;
    }
    let mut best = 0;
    for c in 1..k {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}

/// Relative error `|a - n| / (|a| + |n|)` between the analytic gradient and
/// central finite differences of the loss, on a random net with
/// D, H, K ≤ 8 and a batch mixing hard-labelled and soft-target inputs.
pub fn gradient_check(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let d = r.gen_range(1..=8);
    let h = r.gen_range(1..=8);
    let k = r.gen_range(2..=8);
    let theta: Vec<f64> = (0..d * h + h + h * k + k)
        .map(|_| r.gen_range(-1.0..1.0))
        .collect();
    let p = MlpParams::from_theta(d, h, k, theta).with_temperature(r.gen_range(0.5..2.0));

    let n_l = r.gen_range(1..=5);
    let lx: Vec<Vec<f64>> = (0..n_l)
        .map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let ly: Vec<usize> = (0..n_l).map(|_| r.gen_range(0..k)).collect();
    let n_m = r.gen_range(1..=5);
    let mx: Vec<Vec<f64>> = (0..n_m)
        .map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let mp: Vec<Vec<f64>> = (0..n_m)
        .map(|_| {
            let v: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let lx_refs: Vec<&[f64]> = lx.iter().map(|v| &v[..]).collect();
    let batch = Batch {
        labeled_x: &lx_refs,
        labeled_y: &ly,
        mixed_x: &mx,
        mixed_p: &mp,
    };
    let w = Weights {
        mu: r.gen_range(0.5..10.0),
        weight_decay: r.gen_range(0.0..0.01),
    };

    let (_, analytic) = loss_and_grad(&p, &batch, w);
    let eps = 1e-6;
    let mut num = vec![0.0; analytic.len()];
    for (idx, g) in num.iter_mut().enumerate() {
        let mut plus = p.clone();
        plus.theta_mut()[idx] += eps;
        let mut minus = p.clone();
        minus.theta_mut()[idx] -= eps;
        *g = (loss(&plus, &batch, w) - loss(&minus, &batch, w)) / (2.0 * eps);
    }
    let diff: f64 = analytic
        .iter()
        .zip(&num)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-300)
}

/// Within-group mass of each row (the diagonal always counts as within).
pub fn within_group_mass(cm: &Confusion, classes: &[usize], groups: &[Vec<usize>]) -> Vec<f64> {
    let which = |c: usize| groups.iter().position(|g| g.contains(&c));
    (0..classes.len())
        .map(|i| {
            (0..classes.len())
                .filter(|&j| j == i || which(classes[i]) == which(classes[j]))
                .map(|j| cm.get(i, j))
                .sum()
        })
        .collect()
}

pub fn row_sums(cm: &Confusion) -> Vec<f64> {
    (0..cm.k()).map(|y| cm.row(y).iter().sum()).collect()
}

/// Multinomial logistic regression by full-batch gradient descent. Returns
/// accuracy on the held-out rows.
pub fn linear_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    k: usize,
    iters: usize,
    lr: f64,
) -> f64 {
    let d = train[0].0.len();
    let mut w = vec![vec![0.0; d + 1]; k];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..iters {
        let mut g = vec![vec![0.0; d + 1]; k];
        for (x, y) in train {
            let s = scores(&w, x);
            let m = s.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / z - if c == *y { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += delta * x[j];
                }
                g[c][d] += delta;
            }
        }
        let n = train.len() as f64;
        for (wc, gc) in w.iter_mut().zip(&g) {
            for (a, b) in wc.iter_mut().zip(gc) {
                *a -= lr * b / n;
            }
        }
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let s = scores(&w, x);
            let mut best = 0;
            for c in 1..k {
                if s[c] > s[best] {
                    best = c;
                }
            }
            best == *y
        })
        .count();
    hits as f64 / test.len() as f64
}
