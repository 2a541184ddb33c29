//! Dawid-Skene truth inference: per-item label posteriors and per-worker
//! confusion matrices estimated jointly by EM, with a Dirichlet prior on
//! every confusion row.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::par;

/// Confusion entries are floored at this value before entering the
/// likelihood.
pub const CONFUSION_FLOOR: f64 = 1e-12;

/// Row-stochastic K×K matrix; row = true class, column = annotated class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Confusion {
    k: usize,
    data: Vec<f64>,
}

impl Confusion {
    pub fn identity(k: usize) -> Self {
        Self::symmetric(k, 1.0)
    }

    /// Diagonal `diag`, off-diagonal mass spread evenly.
    pub fn symmetric(k: usize, diag: f64) -> Self {
        let off = if k > 1 {
            (1.0 - diag) / (k - 1) as f64
        } else {
            0.0
        };
        let mut data = vec![off; k * k];
        for y in 0..k {
            data[y * k + y] = diag;
        }
        Self { k, data }
    }

    /// Builds from rows without normalizing. Rows must be square.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, String> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(format!("confusion matrix must be square ({k} rows)"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("confusion entries must be finite and non-negative".into());
        }
        Ok(Self {
            k,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, y: usize, z: usize) -> f64 {
        self.data[y * self.k + z]
    }

    pub fn set(&mut self, y: usize, z: usize, v: f64) {
        self.data[y * self.k + z] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.k..(y + 1) * self.k]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [f64] {
        &mut self.data[y * self.k..(y + 1) * self.k]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.k.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.k).map(|y| self.get(y, y)).collect()
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.diagonal().iter().sum::<f64>() / self.k as f64
    }

    /// Divides every row by its sum (plus `guard`).
    pub fn normalize_rows(&mut self, guard: f64) {
        let k = self.k;
        for row in self.data.chunks_mut(k.max(1)) {
            let s: f64 = row.iter().sum::<f64>() + guard;
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks(self.k.max(1))
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<Vec<f64>>> for Confusion {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::from_rows(rows)
    }
}

impl From<Confusion> for Vec<Vec<f64>> {
    fn from(c: Confusion) -> Self {
        c.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSkill {
    pub worker_id: String,
    pub confusion: Confusion,
    pub annotation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorMode {
    /// One diagonal for every worker and class.
    Homogeneous,
    /// Per-class diagonal strengths.
    ClassAware { diagonals: Vec<f64> },
    /// Per-worker prior matrices; unknown workers fall back to homogeneous.
    WorkerAware {
        workers: BTreeMap<String, Confusion>,
    },
    /// Average of the class-aware and worker-aware prior means.
    Both {
        diagonals: Vec<f64>,
        workers: BTreeMap<String, Confusion>,
    },
}

/// Dirichlet prior `Dir(n_beta * alpha)` on every confusion row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillPrior {
    #[serde(default = "default_n_beta")]
    pub n_beta: f64,
    #[serde(default = "default_alpha_diag")]
    pub alpha_diag: f64,
    #[serde(default = "default_mode")]
    pub mode: PriorMode,
}

fn default_n_beta() -> f64 {
    10.0
}

fn default_alpha_diag() -> f64 {
    0.7
}

fn default_mode() -> PriorMode {
    PriorMode::Homogeneous
}

impl Default for SkillPrior {
    fn default() -> Self {
        Self {
            n_beta: default_n_beta(),
            alpha_diag: default_alpha_diag(),
            mode: default_mode(),
        }
    }
}

impl SkillPrior {
    /// Prior mean row for true class `y` of `worker`.
    pub fn mean_row(&self, worker: &str, y: usize, k: usize) -> Vec<f64> {
        let diag_row = |diag: f64| {
            let off = (1.0 - diag) / (k - 1) as f64;
            let mut r = vec![off; k];
            r[y] = diag;
            r
        };
        let class_row = |diags: &[f64]| diag_row(diags.get(y).copied().unwrap_or(self.alpha_diag));
        let worker_row = |workers: &BTreeMap<String, Confusion>| match workers.get(worker) {
            Some(m) if m.k() == k => {
                let s: f64 = m.row(y).iter().sum();
                m.row(y).iter().map(|v| v / s).collect()
            }
            _ => diag_row(self.alpha_diag),
        };
        match &self.mode {
            PriorMode::Homogeneous => diag_row(self.alpha_diag),
            PriorMode::ClassAware { diagonals } => class_row(diagonals),
            PriorMode::WorkerAware { workers } => worker_row(workers),
            PriorMode::Both { diagonals, workers } => class_row(diagonals)
                .iter()
                .zip(worker_row(workers))
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        }
    }

    /// Pseudo-counts `n_beta * mean` for every row.
    pub fn pseudo_counts(&self, worker: &str, k: usize) -> Confusion {
        let mut data = Vec::with_capacity(k * k);
        for y in 0..k {
            data.extend(
                self.mean_row(worker, y, k)
                    .into_iter()
                    .map(|v| v * self.n_beta),
            );
        }
        Confusion { k, data }
    }

    /// Skill with no observed annotations: the normalized prior.
    pub fn initial_skill(&self, worker: &str, k: usize) -> WorkerSkill {
        let mut confusion = self.pseudo_counts(worker, k);
        confusion.normalize_rows(0.0);
        WorkerSkill {
            worker_id: worker.to_string(),
            confusion,
            annotation_count: 0,
        }
    }
}

/// Per-item inference state.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelState {
    pub posterior: Vec<f64>,
    pub aggregated: usize,
    pub risk: f64,
    pub finished: bool,
    pub annotation_count: usize,
}

impl LabelState {
    pub fn from_posterior(posterior: Vec<f64>, annotation_count: usize) -> Self {
        let aggregated = argmax(&posterior);
        let risk = 1.0 - posterior[aggregated];
        Self {
            posterior,
            aggregated,
            risk,
            finished: false,
            annotation_count,
        }
    }

    pub fn max_prob(&self) -> f64 {
        self.posterior[self.aggregated]
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One annotation record, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub item: String,
    pub worker: String,
    pub label: usize,
    pub step: usize,
}

/// Append-only log of annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationLog {
    records: Vec<Annotation>,
}

impl AnnotationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Annotation) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[Annotation] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, serde_json::Error> {
        let mut records = vec![];
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }
}

/// Index form of an annotation log, grouped by item and by worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    k: usize,
    by_item: Vec<Vec<(usize, usize)>>,
    by_worker: Vec<Vec<(usize, usize)>>,
    len: usize,
}

impl Observations {
    pub fn new(n_items: usize, n_workers: usize, k: usize) -> Self {
        Self {
            k,
            by_item: vec![vec![]; n_items],
            by_worker: vec![vec![]; n_workers],
            len: 0,
        }
    }

    /// Builds from `(item, worker, label)` triples.
    pub fn from_triples(
        n_items: usize,
        n_workers: usize,
        k: usize,
        triples: &[(usize, usize, usize)],
    ) -> Self {
        let mut obs = Self::new(n_items, n_workers, k);
        for &(i, j, z) in triples {
            obs.push(i, j, z);
        }
        obs
    }

    /// Builds from a string-keyed log. Records with unknown ids are skipped.
    pub fn from_log(
        log: &AnnotationLog,
        items: &HashMap<String, usize>,
        workers: &HashMap<String, usize>,
        k: usize,
    ) -> Self {
        let mut obs = Self::new(items.len(), workers.len(), k);
        for r in log.records() {
            if let (Some(&i), Some(&j)) = (items.get(&r.item), workers.get(&r.worker)) {
                obs.push(i, j, r.label);
            }
        }
        obs
    }

    pub fn push(&mut self, item: usize, worker: usize, label: usize) {
        assert!(label < self.k, "annotation label {label} out of range");
        self.by_item[item].push((worker, label));
        self.by_worker[worker].push((item, label));
        self.len += 1;
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn n_workers(&self) -> usize {
        self.by_worker.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn item(&self, i: usize) -> &[(usize, usize)] {
        &self.by_item[i]
    }

    pub fn worker(&self, j: usize) -> &[(usize, usize)] {
        &self.by_worker[j]
    }

    pub fn has_labeled(&self, item: usize, worker: usize) -> bool {
        self.by_item[item].iter().any(|&(j, _)| j == worker)
    }
}

/// Normalizes log-scores into probabilities. Adding a constant to every
/// score leaves the result unchanged.
pub fn normalize_log_scores(scores: &[f64]) -> Option<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    Some(exps.into_iter().map(|e| e / total).collect())
}

fn item_posterior(
    annotations: &[(usize, usize)],
    skills: &[WorkerSkill],
    prior: &[f64],
    k: usize,
) -> Option<Vec<f64>> {
    if annotations.is_empty() {
        return Some(prior.to_vec());
    }
    // Terms are summed in sorted order so that classes with the same
    // multiset of factors get bit-identical scores.
    let mut terms = Vec::with_capacity(annotations.len() + 1);
    let scores: Vec<f64> = (0..k)
        .map(|y| {
            terms.clear();
            terms.push(prior[y].ln());
            for &(j, z) in annotations {
                terms.push(skills[j].confusion.get(y, z).max(CONFUSION_FLOOR).ln());
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect();
    normalize_log_scores(&scores)
}

/// Label posteriors given fixed skills. The model prior replaces the class
/// prior; items without annotations keep their prior row.
pub fn e_step(
    obs: &Observations,
    skills: &[WorkerSkill],
    model_prior: &[Vec<f64>],
) -> Result<Vec<LabelState>, InferenceError> {
    let k = obs.k();
    let states = par::map_range(obs.n_items(), |i| {
        item_posterior(obs.item(i), skills, &model_prior[i], k)
            .map(|p| LabelState::from_posterior(p, obs.item(i).len()))
            .ok_or(InferenceError::ZeroPosterior { item: i })
    });
    states.into_iter().collect()
}

/// MAP confusion matrices given hard aggregated labels.
pub fn m_step(
    obs: &Observations,
    labels: &[LabelState],
    prior: &SkillPrior,
    worker_ids: &[String],
) -> Vec<WorkerSkill> {
    let k = obs.k();
    par::map_range(obs.n_workers(), |j| {
        let mut counts = prior.pseudo_counts(&worker_ids[j], k);
        for &(i, z) in obs.worker(j) {
            let y = labels[i].aggregated;
            counts.set(y, z, counts.get(y, z) + 1.0);
        }
        counts.normalize_rows(0.0);
        WorkerSkill {
            worker_id: worker_ids[j].clone(),
            confusion: counts,
            annotation_count: obs.worker(j).len(),
        }
    })
}

/// Mean over records of `p(z_ij | ȳ_i, w_j)`.
pub fn mean_likelihood(
    obs: &Observations,
    labels: &[LabelState],
    skills: &[WorkerSkill],
) -> Result<f64, InferenceError> {
    if obs.is_empty() {
        return Err(InferenceError::EmptyLog);
    }
    let mut total = 0.0;
    for (i, anns) in obs.by_item.iter().enumerate() {
        let y = labels[i].aggregated;
        for &(j, z) in anns {
            total += skills[j].confusion.get(y, z);
        }
    }
    Ok(total / obs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// Stop when no aggregated label changes between iterations.
    Hard,
    /// Stop when the mean annotation likelihood moves by at most epsilon.
    Soft,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub labels: Vec<LabelState>,
    pub skills: Vec<WorkerSkill>,
    pub iters: usize,
    pub converged: bool,
}

pub fn run_em(
    obs: &Observations,
    skills_init: Vec<WorkerSkill>,
    model_prior: &[Vec<f64>],
    prior: &SkillPrior,
    epsilon: f64,
    max_iters: usize,
    mode: Convergence,
) -> Result<EmOutcome, InferenceError> {
    if !(epsilon > 0.0) {
        return Err(InferenceError::InvalidParam(
            "epsilon must be positive".into(),
        ));
    }
    if max_iters == 0 {
        return Err(InferenceError::InvalidParam(
            "max_iters must be at least 1".into(),
        ));
    }
    if obs.is_empty() {
        let labels = e_step(obs, &skills_init, model_prior)?;
        return Ok(EmOutcome {
            labels,
            skills: skills_init,
            iters: 1,
            converged: true,
        });
    }
    let worker_ids: Vec<String> = skills_init.iter().map(|s| s.worker_id.clone()).collect();
    let mut skills = skills_init;
    let mut prev_labels: Option<Vec<usize>> = None;
    let mut prev_lik: Option<f64> = None;
    let mut labels = vec![];
    for iter in 1..=max_iters {
        labels = e_step(obs, &skills, model_prior)?;
        skills = m_step(obs, &labels, prior, &worker_ids);
        let converged = match mode {
            Convergence::Hard => {
                let current: Vec<usize> = labels.iter().map(|l| l.aggregated).collect();
                let same = prev_labels.as_ref() == Some(&current);
                prev_labels = Some(current);
                same
            }
            Convergence::Soft => {
                let lik = mean_likelihood(obs, &labels, &skills)?;
                let same = prev_lik.is_some_and(|p| (lik - p).abs() <= epsilon);
                prev_lik = Some(lik);
                same
            }
        };
        if converged {
            return Ok(EmOutcome {
                labels,
                skills,
                iters: iter,
                converged: true,
            });
        }
    }
    Ok(EmOutcome {
        labels,
        skills,
        iters: max_iters,
        converged: false,
    })
}
