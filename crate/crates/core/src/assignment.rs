//! Which worker labels which HIT.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::AssignError;
use crate::inference::{LabelState, Observations, WorkerSkill};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    Random,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    pub mode: AssignMode,
    /// Most annotations a worker may give under greedy assignment.
    pub alpha_cap: usize,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            mode: AssignMode::Random,
            alpha_cap: 2000,
        }
    }
}

/// Per-item worker restrictions. Items absent from the map may be labeled
/// by anyone.
pub type ItemPools = BTreeMap<usize, Vec<usize>>;

fn candidates<'a>(
    item: usize,
    n_workers: usize,
    obs: &'a Observations,
    pools: &'a ItemPools,
) -> impl Iterator<Item = usize> + 'a {
    let all: Box<dyn Iterator<Item = usize>> = match pools.get(&item) {
        Some(p) => Box::new(p.iter().copied()),
        None => Box::new(0..n_workers),
    };
    all.filter(move |&j| !obs.has_labeled(item, j))
}

/// Whether any worker may still label `item`.
pub fn has_eligible_worker(
    item: usize,
    n_workers: usize,
    obs: &Observations,
    pools: &ItemPools,
) -> bool {
    candidates(item, n_workers, obs, pools).next().is_some()
}

/// Uniform worker per item among those who have not labeled it yet.
/// Items with nobody left map to `None`.
pub fn assign_random_partial(
    hits: &[usize],
    n_workers: usize,
    obs: &Observations,
    pools: &ItemPools,
    seed: u64,
) -> Vec<(usize, Option<usize>)> {
    let mut r = rng::stream(seed, "assignment.random");
    hits.iter()
        .map(|&i| {
            let c: Vec<usize> = candidates(i, n_workers, obs, pools).collect();
            let pick = (!c.is_empty()).then(|| c[r.gen_range(0..c.len())]);
            (i, pick)
        })
        .collect()
}

pub fn assign_random(
    hits: &[usize],
    n_workers: usize,
    obs: &Observations,
    pools: &ItemPools,
    seed: u64,
) -> Result<Vec<(usize, usize)>, AssignError> {
    complete(assign_random_partial(hits, n_workers, obs, pools, seed))
}

/// Expected probability that `skill` labels an item with this posterior
/// correctly.
pub fn expected_accuracy(posterior: &[f64], skill: &WorkerSkill) -> f64 {
    posterior
        .iter()
        .enumerate()
        .map(|(y, p)| p * skill.confusion.get(y, y))
        .sum()
}

/// For each item in order, the eligible worker with the highest expected
/// accuracy under the item's posterior; lowest index on ties. A worker is
/// eligible while below `alpha_cap` annotations, counting assignments made
/// earlier in this batch.
pub fn assign_greedy_partial(
    hits: &[usize],
    labels: &[LabelState],
    skills: &[WorkerSkill],
    obs: &Observations,
    pools: &ItemPools,
    alpha_cap: usize,
) -> Vec<(usize, Option<usize>)> {
    let mut load: Vec<usize> = (0..skills.len()).map(|j| obs.worker(j).len()).collect();
    hits.iter()
        .map(|&i| {
            let mut best: Option<(usize, f64)> = None;
            for j in candidates(i, skills.len(), obs, pools) {
                if load[j] >= alpha_cap {
                    continue;
                }
                let s = expected_accuracy(&labels[i].posterior, &skills[j]);
                if best.is_none_or(|(bj, bs)| s > bs || (s == bs && j < bj)) {
                    best = Some((j, s));
                }
            }
            let pick = best.map(|(j, _)| j);
            if let Some(j) = pick {
                load[j] += 1;
            }
            (i, pick)
        })
        .collect()
}

pub fn assign_greedy(
    hits: &[usize],
    labels: &[LabelState],
    skills: &[WorkerSkill],
    obs: &Observations,
    pools: &ItemPools,
    alpha_cap: usize,
) -> Result<Vec<(usize, usize)>, AssignError> {
    complete(assign_greedy_partial(
        hits, labels, skills, obs, pools, alpha_cap,
    ))
}

fn complete(pairs: Vec<(usize, Option<usize>)>) -> Result<Vec<(usize, usize)>, AssignError> {
    pairs
        .into_iter()
        .map(|(i, j)| {
            j.map(|j| (i, j))
                .ok_or(AssignError::NoEligibleWorker { item: i })
        })
        .collect()
}

pub const IMPORTANCE_FORMULA: &str =
    "importance_j = sum_k w_k * conf_j[k][k] * n_jk; w_k = (1 / max(acc_k, 0.01)) / sum_c (1 / max(acc_c, 0.01)); \
     acc_k = model per-class accuracy; n_jk = annotations by j on items aggregated as k";

/// Worker importance for reporting: per-class reliability times the number
/// of annotations on that class, weighted towards classes the model finds
/// hard. See [`IMPORTANCE_FORMULA`].
pub fn worker_importance(
    obs: &Observations,
    labels: &[LabelState],
    skills: &[WorkerSkill],
    model_class_accuracy: &[f64],
) -> Vec<f64> {
    let inv: Vec<f64> = model_class_accuracy
        .iter()
        .map(|a| 1.0 / a.max(0.01))
        .collect();
    let total: f64 = inv.iter().sum();
    let w: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let k = obs.k();
    skills
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut n = vec![0usize; k];
            for &(i, _) in obs.worker(j) {
                n[labels[i].aggregated] += 1;
            }
            (0..k)
                .map(|c| w.get(c).copied().unwrap_or(0.0) * s.confusion.get(c, c) * n[c] as f64)
                .sum()
        })
        .collect()
}
