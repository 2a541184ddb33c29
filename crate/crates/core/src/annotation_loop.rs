//! The online annotation loop: sample HITs from the unfinished set, collect
//! simulated annotations, re-run EM with the model as class prior, refit
//! the model, and stop once the finished set stops growing.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::assignment::{self, AssignMode, AssignmentConfig, ItemPools};
use crate::dataset::FeatureStore;
use crate::error::Result;
use crate::inference::{
    e_step, run_em, Annotation, AnnotationLog, Convergence, LabelState, Observations, SkillPrior,
    WorkerSkill,
};
use crate::learner::{
    self, calibrate_temperature, fit_temperature, predict_all, select_model, select_pseudo_labels,
    to_f64_rows, Incumbent, MlpParams, SemiMode, TrainConfig,
};
use crate::metrics::{self, StepMetrics};
use crate::par;
use crate::rng::{self, Rng};
use crate::workers::{self, SimWorker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Items with risk below this are finished (C).
    pub risk_threshold: f64,
    /// HITs per batch (B).
    pub batch_size: usize,
    pub max_annotations_per_item: usize,
    /// Steps without growth of the finished set before stopping (beta).
    pub stop_patience: usize,
    pub max_steps: usize,
    /// Annotations gathered between model refits.
    pub labels_per_update: usize,
    /// Folds for cross-validated calibration.
    pub calibration_folds: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            risk_threshold: 0.1,
            batch_size: 256,
            max_annotations_per_item: 3,
            stop_patience: 5,
            max_steps: 1000,
            labels_per_update: 256,
            calibration_folds: 3,
        }
    }
}

impl LoopConfig {
    /// Returns the offending field and a message.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.risk_threshold > 0.0 && self.risk_threshold < 1.0) {
            return Err((
                "risk_threshold",
                format!("{} not in (0, 1)", self.risk_threshold),
            ));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("max_annotations_per_item", self.max_annotations_per_item),
            ("stop_patience", self.stop_patience),
            ("max_steps", self.max_steps),
            ("labels_per_update", self.labels_per_update),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err((name, "must be at least 1".into()));
            }
        }
        if self.calibration_folds < 2 {
            return Err(("calibration_folds", "must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    None,
    /// Temperature fitted on the clean validation prototypes.
    Prototypes,
    /// Temperature fitted on held-out folds of the annotated items.
    CrossValidation,
}

/// The switches that distinguish the method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    pub learn: bool,
    pub calibration: Calibration,
    pub convergence: Convergence,
    pub global_selection: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSettings {
    pub loop_cfg: LoopConfig,
    pub train: TrainConfig,
    pub prior: SkillPrior,
    pub assignment: AssignmentConfig,
    pub em_epsilon: f64,
    pub em_max_iters: usize,
    pub switches: Switches,
}

/// 1 - max posterior: the expected 0/1 cost of committing to the argmax.
pub fn compute_risk(posterior: &[f64]) -> f64 {
    1.0 - posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_finished(l: &LabelState, cfg: &LoopConfig) -> bool {
    l.risk < cfg.risk_threshold || l.annotation_count >= cfg.max_annotations_per_item
}

/// Marks each item finished or not and returns (finished, unfinished).
pub fn partition(labels: &mut [LabelState], cfg: &LoopConfig) -> (Vec<usize>, Vec<usize>) {
    let mut finished = vec![];
    let mut unfinished = vec![];
    for (i, l) in labels.iter_mut().enumerate() {
        l.finished = is_finished(l, cfg);
        if l.finished {
            finished.push(i);
        } else {
            unfinished.push(i);
        }
    }
    (finished, unfinished)
}

/// `min(b, |unfinished|)` distinct items drawn uniformly without replacement.
pub fn build_hits(unfinished: &[usize], b: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(b >= 1, "batch size must be at least 1");
    let n = b.min(unfinished.len());
    index::sample(rng, unfinished.len(), n)
        .into_iter()
        .map(|p| unfinished[p])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    UnfinishedEmpty,
    MaxSteps,
}

/// Stopping rule bookkeeping: a running maximum of the finished-set size
/// and the number of consecutive steps without exceeding it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Patience {
    pub finished_max: usize,
    pub counter: usize,
}

impl Patience {
    pub fn observe(&mut self, finished_size: usize) {
        if finished_size > self.finished_max {
            self.finished_max = finished_size;
            self.counter = 0;
        } else {
            self.counter += 1;
        }
    }
}

pub fn should_stop(
    step: usize,
    patience: Patience,
    n_unfinished: usize,
    cfg: &LoopConfig,
) -> Option<StopReason> {
    if n_unfinished == 0 {
        Some(StopReason::UnfinishedEmpty)
    } else if patience.counter >= cfg.stop_patience {
        Some(StopReason::Patience)
    } else if step >= cfg.max_steps {
        Some(StopReason::MaxSteps)
    } else {
        None
    }
}

/// Source of annotations. `item` and `worker` are loop-local indices.
pub trait Annotator {
    fn annotate(&mut self, item: usize, worker: usize) -> usize;
}

/// Draws annotations from simulated workers' confusion rows. Entries in
/// `fixed` override the draw for specific (item, worker) pairs.
pub struct SimAnnotator {
    workers: Vec<SimWorker>,
    streams: Vec<Rng>,
    truth: Vec<usize>,
    fixed: BTreeMap<(usize, usize), usize>,
}

impl SimAnnotator {
    pub fn new(
        workers: Vec<SimWorker>,
        truth: Vec<usize>,
        fixed: BTreeMap<(usize, usize), usize>,
    ) -> Self {
        let streams = workers
            .iter()
            .map(|w| rng::stream(w.rng_seed, "annotate"))
            .collect();
        Self {
            workers,
            streams,
            truth,
            fixed,
        }
    }
}

impl Annotator for SimAnnotator {
    fn annotate(&mut self, item: usize, worker: usize) -> usize {
        if let Some(&z) = self.fixed.get(&(item, worker)) {
            return z;
        }
        workers::annotate(
            &self.workers[worker],
            self.truth[item],
            &mut self.streams[worker],
        )
    }
}

/// What the loop annotates.
#[derive(Debug, Clone)]
pub struct Task<'a> {
    pub features: &'a FeatureStore,
    /// Number of classes including the OOD class when present.
    pub classes: usize,
    /// Number of target classes on OOD runs.
    pub target_classes: Option<usize>,
    /// Feature rows of the annotatable items.
    pub items: Vec<usize>,
    pub item_ids: Vec<String>,
    pub truth: Vec<Option<usize>>,
    /// Clean validation prototypes as (feature row, label).
    pub val: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub step: usize,
    pub labels: Vec<LabelState>,
    pub skills: Vec<WorkerSkill>,
    pub model: Option<MlpParams>,
    pub incumbent: Option<Incumbent>,
    pub patience: Patience,
    pub log: AnnotationLog,
    pub obs: Observations,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub labels: Vec<LabelState>,
    pub skills: Vec<WorkerSkill>,
    pub model: Option<MlpParams>,
    pub log: AnnotationLog,
    pub obs: Observations,
    pub metrics: Vec<StepMetrics>,
    pub residual: Vec<usize>,
    pub stop_reason: StopReason,
    pub steps: usize,
}

pub struct AnnotationLoop<'a, A: Annotator> {
    task: Task<'a>,
    settings: LoopSettings,
    worker_ids: Vec<String>,
    pools: ItemPools,
    annotator: A,
    seed: u64,
    pub state: LoopState,
}

fn uniform_rows(n: usize, k: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / k as f64; k]; n]
}

impl<'a, A: Annotator> AnnotationLoop<'a, A> {
    pub fn new(
        task: Task<'a>,
        settings: LoopSettings,
        worker_ids: Vec<String>,
        pools: ItemPools,
        annotator: A,
        seed: u64,
    ) -> Result<Self> {
        settings
            .loop_cfg
            .validate()
            .map_err(|(f, m)| crate::error::ConfigError::new(format!("loop.{f}"), m))?;
        let n = task.items.len();
        let k = task.classes;
        let obs = Observations::new(n, worker_ids.len(), k);
        let skills: Vec<WorkerSkill> = worker_ids
            .iter()
            .map(|w| settings.prior.initial_skill(w, k))
            .collect();
        let mut labels = e_step(&obs, &skills, &uniform_rows(n, k))?;
        partition(&mut labels, &settings.loop_cfg);
        let mut lp = Self {
            task,
            settings,
            worker_ids,
            pools,
            annotator,
            seed,
            state: LoopState {
                step: 0,
                labels,
                skills,
                model: None,
                incumbent: None,
                patience: Patience::default(),
                log: AnnotationLog::new(),
                obs,
                metrics: vec![],
            },
        };
        lp.record_metrics();
        Ok(lp)
    }

    fn unfinished(&self) -> Vec<usize> {
        (0..self.state.labels.len())
            .filter(|&i| !self.state.labels[i].finished)
            .collect()
    }

    fn record_metrics(&mut self) {
        let finished: Vec<bool> = self.state.labels.iter().map(|l| l.finished).collect();
        let row = metrics::step_metrics(
            self.state.step,
            self.state.log.len(),
            &self.state.labels,
            &self.task.truth,
            &finished,
            self.task.target_classes,
        );
        self.state.metrics.push(row);
    }

    fn model_prior(&self) -> Vec<Vec<f64>> {
        match &self.state.model {
            Some(m) => predict_all(m, self.task.features, &self.task.items),
            None => uniform_rows(self.task.items.len(), self.task.classes),
        }
    }

    /// Gathers up to `labels_per_update` annotations in batches of B HITs.
    fn collect_annotations(&mut self) -> usize {
        let cfg = self.settings.loop_cfg.clone();
        let n_workers = self.worker_ids.len();
        let mut hit_rng = rng::stream_indexed(self.seed, "loop.hits", self.state.step as u64);
        let mut gathered = 0;
        let mut round = 0u64;
        while gathered < cfg.labels_per_update {
            let candidates: Vec<usize> = self
                .unfinished()
                .into_iter()
                .filter(|&i| {
                    self.state.obs.item(i).len() < cfg.max_annotations_per_item
                        && assignment::has_eligible_worker(
                            i,
                            n_workers,
                            &self.state.obs,
                            &self.pools,
                        )
                })
                .collect();
            if candidates.is_empty() {
                break;
            }
            let b = cfg.batch_size.min(cfg.labels_per_update - gathered);
            let hits = build_hits(&candidates, b, &mut hit_rng);
            let pairs = match self.settings.assignment.mode {
                AssignMode::Random => assignment::assign_random_partial(
                    &hits,
                    n_workers,
                    &self.state.obs,
                    &self.pools,
                    rng::derive_indexed(
                        self.seed,
                        "loop.assign",
                        (self.state.step as u64) << 20 | round,
                    ),
                ),
                AssignMode::Greedy => assignment::assign_greedy_partial(
                    &hits,
                    &self.state.labels,
                    &self.state.skills,
                    &self.state.obs,
                    &self.pools,
                    self.settings.assignment.alpha_cap,
                ),
            };
            let before = gathered;
            for (i, j) in pairs {
                let Some(j) = j else { continue };
                let z = self.annotator.annotate(i, j);
                self.state.obs.push(i, j, z);
                self.state.log.push(Annotation {
                    item: self.task.item_ids[i].clone(),
                    worker: self.worker_ids[j].clone(),
                    label: z,
                    step: self.state.step,
                });
                gathered += 1;
            }
            if gathered == before {
                break;
            }
            round += 1;
        }
        gathered
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_indexed(self.seed, "loop.train", self.state.step as u64),
            ..self.settings.train.clone()
        }
    }

    /// Temperature from held-out folds of the training items.
    fn cross_validated_temperature(
        &self,
        train: &[(usize, usize)],
        cfg: &TrainConfig,
    ) -> Result<Option<f64>> {
        let folds = self.settings.loop_cfg.calibration_folds;
        if train.len() < folds {
            return Ok(None);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "loop.folds"));
        let feats = self.task.features;
        let classes = self.task.classes;
        let parts = par::map_range(folds, |f| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
            let (held, rest): (Vec<usize>, Vec<usize>) =
                order.iter().partition(|&&o| o % folds == f);
            let fit_set: Vec<(usize, usize)> = rest.iter().map(|&o| train[o]).collect();
            let p = learner::fit(feats, classes, &fit_set, cfg)?;
            let xs = to_f64_rows(feats, held.iter().map(|&o| train[o].0));
            let logits = xs.iter().map(|x| p.logits(x)).collect();
            Ok((logits, held.iter().map(|&o| train[o].1).collect()))
        });
        let mut logits = vec![];
        let mut labels = vec![];
        for part in parts {
            let (l, y) = part?;
            logits.extend(l);
            labels.extend(y);
        }
        Ok(Some(fit_temperature(&logits, &labels)?))
    }

    /// Fits, calibrates and selects the model for this step.
    fn update_model(&mut self, labels: &[LabelState]) -> Result<()> {
        let items = &self.task.items;
        let annotated: Vec<usize> = (0..items.len())
            .filter(|&i| !self.state.obs.item(i).is_empty())
            .collect();
        if annotated.is_empty() {
            return Ok(());
        }
        let cfg = self.train_config();
        let hard: Vec<(usize, usize)> = annotated
            .iter()
            .map(|&i| (items[i], labels[i].aggregated))
            .collect();
        let candidate = match cfg.semi_mode {
            SemiMode::None => learner::fit(self.task.features, self.task.classes, &hard, &cfg)?,
            SemiMode::Pseudo => {
                let mut train = hard.clone();
                train.extend(
                    select_pseudo_labels(labels, cfg.tau)
                        .into_iter()
                        .filter(|&(i, _)| self.state.obs.item(i).is_empty())
                        .map(|(i, y)| (items[i], y)),
                );
                learner::fit(self.task.features, self.task.classes, &train, &cfg)?
            }
            SemiMode::Mixmatch => {
                let unlabeled: Vec<(usize, Vec<f64>)> = select_pseudo_labels(labels, cfg.tau)
                    .into_iter()
                    .filter(|&(i, _)| self.state.obs.item(i).is_empty())
                    .map(|(i, _)| (items[i], labels[i].posterior.clone()))
                    .collect();
                learner::fit_mixmatch(
                    self.task.features,
                    self.task.classes,
                    &hard,
                    &unlabeled,
                    &cfg,
                )?
            }
        };
        let candidate = match self.settings.switches.calibration {
            Calibration::None => candidate,
            Calibration::Prototypes => {
                calibrate_temperature(candidate, self.task.features, &self.task.val)?
            }
            Calibration::CrossValidation => match self.cross_validated_temperature(&hard, &cfg)? {
                Some(t) => candidate.with_temperature(t),
                None => candidate,
            },
        };
        let chosen = if self.settings.switches.global_selection {
            let (inc, replaced) = select_model(
                candidate,
                self.state.incumbent.take(),
                self.task.features,
                &self.task.val,
            )?;
            log::debug!(
                "step {}: candidate kept = {replaced}, val loss {:.4}",
                self.state.step,
                inc.loss
            );
            let p = inc.params.clone();
            self.state.incumbent = Some(inc);
            p
        } else {
            candidate
        };
        self.state.model = Some(chosen);
        Ok(())
    }

    /// One pass of the loop body. Returns the number of new annotations.
    pub fn run_step(&mut self) -> Result<usize> {
        if self.unfinished().is_empty() {
            self.state.step += 1;
            return Ok(0);
        }
        let gathered = self.collect_annotations();
        let k = self.task.classes;
        let prior_rows = self.model_prior();
        let init: Vec<WorkerSkill> = self
            .worker_ids
            .iter()
            .map(|w| self.settings.prior.initial_skill(w, k))
            .collect();
        let em = run_em(
            &self.state.obs,
            init,
            &prior_rows,
            &self.settings.prior,
            self.settings.em_epsilon,
            self.settings.em_max_iters,
            self.settings.switches.convergence,
        )?;
        let mut labels = em.labels;
        if self.settings.switches.learn {
            self.update_model(&labels)?;
            if self.state.model.is_some() {
                labels = e_step(&self.state.obs, &em.skills, &self.model_prior())?;
            }
        }
        partition(&mut labels, &self.settings.loop_cfg);
        self.state.labels = labels;
        self.state.skills = em.skills;
        self.state.step += 1;
        let finished_size = self.state.labels.iter().filter(|l| l.finished).count();
        self.state.patience.observe(finished_size);
        self.record_metrics();
        log::info!(
            "step {}: +{gathered} annotations, finished {finished_size}/{}, top1 {}",
            self.state.step,
            self.state.labels.len(),
            self.state
                .metrics
                .last()
                .and_then(|m| m.top1)
                .map_or("-".into(), |t| format!("{t:.4}"))
        );
        Ok(gathered)
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        should_stop(
            self.state.step,
            self.state.patience,
            self.unfinished().len(),
            &self.settings.loop_cfg,
        )
    }

    pub fn run(mut self) -> Result<LoopOutcome> {
        let stop_reason = loop {
            if let Some(r) = self.stop_reason() {
                break r;
            }
            self.run_step()?;
        };
        let residual = self.unfinished();
        let s = self.state;
        Ok(LoopOutcome {
            labels: s.labels,
            skills: s.skills,
            model: s.model,
            log: s.log,
            obs: s.obs,
            metrics: s.metrics,
            residual,
            stop_reason,
            steps: s.step,
        })
    }
}
