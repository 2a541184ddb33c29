//! Simulated annotators.
//!
//! Structured workers are sampled from a bank of per-group empirical
//! confusion matrices: one matrix per group is drawn, blended with the
//! group's pooled matrix, restricted to the target classes, row-normalized,
//! and then a fraction `noise_level` of each row's within-group mass is
//! spread evenly over the out-of-group columns.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FeatureStore, ItemMeta, Manifest, OOD_CLASS_NAME};
use crate::error::SimError;
use crate::inference::Confusion;
use crate::rng::{self, Rng};

/// Mass given to the OOD column of every in-distribution row before
/// renormalization.
pub const OOD_COLUMN_MASS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorker {
    pub worker_id: String,
    pub confusion: Confusion,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankWorker {
    pub group: usize,
    pub matrix: Confusion,
}

/// Empirical worker matrices over a global class universe, grouped by the
/// class group each worker annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillBank {
    pub classes: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub workers: Vec<BankWorker>,
}

impl SkillBank {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn group_workers(&self, group: usize) -> Vec<&Confusion> {
        self.workers
            .iter()
            .filter(|w| w.group == group)
            .map(|w| &w.matrix)
            .collect()
    }

    /// Sum of every stored matrix of `group`.
    pub fn pooled(&self, group: usize) -> Confusion {
        let k = self.k();
        let mut out = Confusion::from_rows(vec![vec![0.0; k]; k]).unwrap();
        for m in self.group_workers(group) {
            for y in 0..k {
                for (o, v) in out.row_mut(y).iter_mut().zip(m.row(y)) {
                    *o += v;
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let k = self.k();
        check_partition(k, &self.groups)?;
        for w in &self.workers {
            if w.group >= self.groups.len() {
                return Err(SimError::InvalidGroups(format!(
                    "worker group {} out of range",
                    w.group
                )));
            }
            if w.matrix.k() != k {
                return Err(SimError::InvalidParam(format!(
                    "bank matrix is {0}x{0}, expected {k}x{k}",
                    w.matrix.k()
                )));
            }
        }
        Ok(())
    }
}

fn check_partition(k: usize, groups: &[Vec<usize>]) -> Result<(), SimError> {
    let mut seen = vec![false; k];
    for g in groups {
        for &c in g {
            if c >= k {
                return Err(SimError::InvalidGroups(format!("class {c} out of range")));
            }
            if seen[c] {
                return Err(SimError::InvalidGroups(format!("class {c} in two groups")));
            }
            seen[c] = true;
        }
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(SimError::InvalidGroups(format!(
            "class {c} not in any group"
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub smooth_ratio: f64,
    pub noise_level: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            smooth_ratio: 1.0,
            noise_level: 0.03,
        }
    }
}

/// Spreads `noise_level` of each row's within-group mass (diagonal
/// included) evenly over the out-of-group columns. `classes[i]` is the
/// class of row/column `i`; `groups` is expressed in the same class ids.
/// Rows with no out-of-group column are left as they are.
pub fn add_group_noise(
    cm: &mut Confusion,
    classes: &[usize],
    groups: &[Vec<usize>],
    noise_level: f64,
) {
    let which = |c: usize| groups.iter().position(|g| g.contains(&c));
    let n = classes.len();
    for i in 0..n {
        let gi = which(classes[i]);
        let mask: Vec<bool> = (0..n).map(|j| j == i || gi == which(classes[j])).collect();
        let n_out = mask.iter().filter(|m| !**m).count();
        if n_out == 0 {
            continue;
        }
        let row = cm.row_mut(i);
        let density: f64 = row
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| v)
            .sum();
        let share = density * noise_level / n_out as f64;
        for (v, &m) in row.iter_mut().zip(&mask) {
            if m {
                *v *= 1.0 - noise_level;
            } else {
                *v += share;
            }
        }
    }
}

/// Samples one structured worker's confusion over `target_classes`
/// (indices into the bank's classes). `groups` partitions bank classes.
pub fn sample_confusion_matrix(
    bank: &SkillBank,
    params: SamplingParams,
    target_classes: &[usize],
    groups: &[Vec<usize>],
    rng: &mut Rng,
) -> Result<Confusion, SimError> {
    if bank.workers.is_empty() {
        return Err(SimError::EmptyBank);
    }
    let k = bank.k();
    if let Some(&bad) = target_classes.iter().find(|&&c| c >= k) {
        return Err(SimError::UnknownClass(bad));
    }
    let mut total = vec![0.0; k * k];
    let present: BTreeSet<usize> = bank.workers.iter().map(|w| w.group).collect();
    for g in present {
        let members = bank.group_workers(g);
        let pick = members[rng.gen_range(0..members.len())];
        let pooled = bank.pooled(g);
        for y in 0..k {
            for z in 0..k {
                total[y * k + z] += params.smooth_ratio * pooled.get(y, z) + pick.get(y, z);
            }
        }
    }
    let rows: Vec<Vec<f64>> = target_classes
        .iter()
        .map(|&y| target_classes.iter().map(|&z| total[y * k + z]).collect())
        .collect();
    let mut cm = Confusion::from_rows(rows).map_err(SimError::InvalidParam)?;
    cm.normalize_rows(1e-8);
    add_group_noise(&mut cm, target_classes, groups, params.noise_level);
    Ok(cm)
}

/// Samples `n` structured workers with ids `w000`, `w001`, ...
pub fn sample_pool(
    bank: &SkillBank,
    params: SamplingParams,
    target_classes: &[usize],
    groups: &[Vec<usize>],
    n: usize,
    seed: u64,
) -> Result<Vec<SimWorker>, SimError> {
    let mut r = rng::stream(seed, "workers.sample");
    (0..n)
        .map(|j| {
            let confusion = sample_confusion_matrix(bank, params, target_classes, groups, &mut r)?;
            Ok(SimWorker {
                worker_id: worker_id(j),
                confusion,
                rng_seed: rng::derive_indexed(seed, "workers.annotate", j as u64),
            })
        })
        .collect()
}

pub fn worker_id(j: usize) -> String {
    format!("w{j:03}")
}

/// Symmetric uniform-noise worker.
pub fn make_uniform_worker(k: usize, accuracy: f64, seed: u64) -> Result<SimWorker, SimError> {
    if !(accuracy > 0.0 && accuracy <= 1.0) {
        return Err(SimError::InvalidParam(format!(
            "accuracy {accuracy} not in (0, 1]"
        )));
    }
    if k < 2 {
        return Err(SimError::InvalidParam("need at least 2 classes".into()));
    }
    Ok(SimWorker {
        worker_id: String::new(),
        confusion: Confusion::symmetric(k, accuracy),
        rng_seed: seed,
    })
}

/// Uniform-noise counterparts of `pool`: same ids and seeds, each with
/// accuracy equal to the matched worker's mean diagonal.
pub fn uniform_counterparts(pool: &[SimWorker]) -> Result<Vec<SimWorker>, SimError> {
    pool.iter()
        .map(|w| {
            let mut u =
                make_uniform_worker(w.confusion.k(), w.confusion.mean_diagonal(), w.rng_seed)?;
            u.worker_id = w.worker_id.clone();
            Ok(u)
        })
        .collect()
}

/// Draws an annotation from row `true_label`.
pub fn annotate(w: &SimWorker, true_label: usize, rng: &mut Rng) -> usize {
    let row = w.confusion.row(true_label);
    let total: f64 = row.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = true_label;
    for (z, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if u < p {
            return z;
        }
        u -= p;
        last = z;
    }
    last
}

/// Random bank whose workers only confuse classes inside their own group.
/// Each row's diagonal is drawn from `within_acc_range`; the rest of the
/// row is split at random over the other classes of the group. Singleton
/// groups get identity rows.
pub fn make_skill_bank_synthetic(
    k: usize,
    groups: &[Vec<usize>],
    n_workers_per_group: usize,
    within_acc_range: (f64, f64),
    seed: u64,
) -> Result<SkillBank, SimError> {
    check_partition(k, groups)?;
    let (lo, hi) = within_acc_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(SimError::InvalidParam(format!(
            "bad accuracy range [{lo}, {hi}]"
        )));
    }
    let mut r = rng::stream(seed, "workers.bank");
    let mut workers = vec![];
    for (g, members) in groups.iter().enumerate() {
        for _ in 0..n_workers_per_group {
            let mut rows = vec![vec![0.0; k]; k];
            for &c in members {
                let others: Vec<usize> = members.iter().copied().filter(|&o| o != c).collect();
                if others.is_empty() {
                    rows[c][c] = 1.0;
                    continue;
                }
                let acc = if hi > lo { r.gen_range(lo..=hi) } else { lo };
                rows[c][c] = acc;
                let w: Vec<f64> = others
                    .iter()
                    .map(|_| -r.gen::<f64>().max(1e-300).ln())
                    .collect();
                let s: f64 = w.iter().sum();
                for (&o, wi) in others.iter().zip(&w) {
                    rows[c][o] = (1.0 - acc) * wi / s;
                }
            }
            workers.push(BankWorker {
                group: g,
                matrix: Confusion::from_rows(rows).map_err(SimError::InvalidParam)?,
            });
        }
    }
    Ok(SkillBank {
        classes: (0..k).map(|c| format!("class_{c:03}")).collect(),
        groups: groups.to_vec(),
        workers,
    })
}

/// Appends `ceil(fraction * N)` out-of-distribution items labelled with the
/// reserved index K, with features drawn away from the target classes.
pub fn inject_ood(
    manifest: &Manifest,
    features: &FeatureStore,
    fraction: f64,
    separation: f64,
    seed: u64,
) -> Result<(Manifest, FeatureStore), SimError> {
    if !(fraction >= 0.0) {
        return Err(SimError::InvalidParam(
            "fraction must be non-negative".into(),
        ));
    }
    let n_new = (fraction * manifest.len() as f64).ceil() as usize;
    if n_new == 0 {
        return Ok((manifest.clone(), features.clone()));
    }
    let mut m = manifest.clone();
    let ood = m.k();
    m.has_ood_class = true;
    m.items.extend((0..n_new).map(|j| ItemMeta {
        id: format!("ood-{j:06}"),
        true_label: Some(ood),
        is_prototype: false,
    }));
    let mut f = features.clone();
    let rows = dataset::gen_ood_features(n_new, f.dim(), separation, 4, seed);
    f.extend_rows(&rows)
        .map_err(|e| SimError::InvalidParam(e.to_string()))?;
    Ok((m, f))
}

/// Extends a K×K worker to (K+1)×(K+1) with an OOD class: in-distribution
/// rows gain an OOD column of mass [`OOD_COLUMN_MASS`] and are renormalized;
/// the OOD row keeps the worker's mean diagonal on OOD and spreads the rest
/// evenly over the K target classes.
pub fn extend_with_ood(c: &Confusion) -> Confusion {
    let k = c.k();
    let mean_diag = c.mean_diagonal();
    let mut rows: Vec<Vec<f64>> = c
        .rows()
        .into_iter()
        .map(|mut r| {
            r.push(OOD_COLUMN_MASS);
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
            r
        })
        .collect();
    let mut ood_row = vec![(1.0 - mean_diag) / k as f64; k + 1];
    ood_row[k] = mean_diag;
    rows.push(ood_row);
    Confusion::from_rows(rows).expect("extended rows are square and non-negative")
}

/// Classes of the extended universe; the OOD name is appended.
pub fn class_names_with_ood(m: &Manifest) -> Vec<String> {
    let mut names = m.class_names.clone();
    if m.has_ood_class {
        names.push(OOD_CLASS_NAME.to_string());
    }
    names
}
