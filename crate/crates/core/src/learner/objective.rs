//! Training objective and its analytic gradient:
//! mean cross-entropy on hard-labelled inputs, plus `mu` times the mean
//! squared L2 distance between soft targets and predictions on mixed inputs,
//! plus `weight_decay / 2 · (‖W1‖² + ‖W2‖²)`.

use super::mlp::{softmax_scaled, MlpParams};

/// A batch borrowed from the caller's buffers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Batch<'a> {
    pub labeled_x: &'a [&'a [f64]],
    pub labeled_y: &'a [usize],
    pub mixed_x: &'a [Vec<f64>],
    pub mixed_p: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub mu: f64,
    pub weight_decay: f64,
}

/// Scratch buffers reused across samples.
pub(crate) struct Workspace {
    pre: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(p: &MlpParams) -> Self {
        Self {
            pre: vec![0.0; p.hidden()],
            logits: vec![0.0; p.classes()],
            dlogits: vec![0.0; p.classes()],
            dhidden: vec![0.0; p.hidden()],
        }
    }
}

/// Back-propagates `ws.dlogits` for input `x` into `grad`.
fn backprop(p: &MlpParams, x: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
    let (h, k) = (p.hidden(), p.classes());
    let o = p.offsets();
    let theta = p.theta();
    for (g, d) in grad[o.b2..].iter_mut().zip(&ws.dlogits) {
        *g += d;
    }
    for u in 0..h {
        let a = ws.pre[u];
        if a <= 0.0 {
            ws.dhidden[u] = 0.0;
            continue;
        }
        let w_row = &theta[o.w2 + u * k..o.w2 + (u + 1) * k];
        let g_row = &mut grad[o.w2 + u * k..o.w2 + (u + 1) * k];
        let mut acc = 0.0;
        for ((g, w), d) in g_row.iter_mut().zip(w_row).zip(&ws.dlogits) {
            *g += a * d;
            acc += w * d;
        }
        ws.dhidden[u] = acc;
    }
    for (g, d) in grad[o.b1..o.w2].iter_mut().zip(&ws.dhidden) {
        *g += d;
    }
    for (dd, &xd) in x.iter().enumerate() {
        if xd == 0.0 {
            continue;
        }
        let g_row = &mut grad[o.w1 + dd * h..o.w1 + (dd + 1) * h];
        for (g, d) in g_row.iter_mut().zip(&ws.dhidden) {
            *g += xd * d;
        }
    }
}

/// Accumulates the batch loss into the return value and its gradient into
/// `grad` (which must be zeroed by the caller).
pub(crate) fn accumulate(
    p: &MlpParams,
    batch: &Batch<'_>,
    weights: Weights,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let mut loss = 0.0;
    let n_l = batch.labeled_x.len();
    if n_l > 0 {
        let scale = 1.0 / n_l as f64;
        for (x, &y) in batch.labeled_x.iter().zip(batch.labeled_y) {
            p.forward_raw(x, &mut ws.pre, &mut ws.logits);
            let q = softmax_scaled(&ws.logits, 1.0);
            loss -= q[y].max(f64::MIN_POSITIVE).ln() * scale;
            for (c, (d, qc)) in ws.dlogits.iter_mut().zip(&q).enumerate() {
                *d = (qc - if c == y { 1.0 } else { 0.0 }) * scale;
            }
            backprop(p, x, ws, grad);
        }
    }
    let n_m = batch.mixed_x.len();
    if n_m > 0 && weights.mu != 0.0 {
        let scale = weights.mu / n_m as f64;
        for (x, target) in batch.mixed_x.iter().zip(batch.mixed_p) {
            p.forward_raw(x, &mut ws.pre, &mut ws.logits);
            let q = softmax_scaled(&ws.logits, 1.0);
            let g: Vec<f64> = q
                .iter()
                .zip(target)
                .map(|(qc, pc)| 2.0 * (qc - pc))
                .collect();
            loss += q
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * scale;
            let dot: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
            for ((d, qc), gc) in ws.dlogits.iter_mut().zip(&q).zip(&g) {
                *d = qc * (gc - dot) * scale;
            }
            backprop(p, x, ws, grad);
        }
    }
    if weights.weight_decay != 0.0 {
        let o = p.offsets();
        let theta = p.theta();
        for range in [o.w1..o.b1, o.w2..o.b2] {
            for idx in range {
                loss += 0.5 * weights.weight_decay * theta[idx] * theta[idx];
                grad[idx] += weights.weight_decay * theta[idx];
            }
        }
    }
    loss
}

/// Full objective value and analytic gradient (same layout as
/// [`MlpParams::theta`]).
pub fn loss_and_grad(p: &MlpParams, batch: &Batch<'_>, weights: Weights) -> (f64, Vec<f64>) {
    let mut ws = Workspace::new(p);
    let mut grad = vec![0.0; p.theta().len()];
    let loss = accumulate(p, batch, weights, &mut ws, &mut grad);
    (loss, grad)
}

pub fn loss(p: &MlpParams, batch: &Batch<'_>, weights: Weights) -> f64 {
    loss_and_grad(p, batch, weights).0
}
