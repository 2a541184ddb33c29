//! Experiment configuration: one JSON document resolves every module's
//! settings. Unknown keys are rejected and errors carry the field path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::annotation_loop::{Calibration, LoopConfig, LoopSettings, Switches};
use crate::assignment::{AssignMode, AssignmentConfig};
use crate::dataset::SyntheticSpec;
use crate::error::ConfigError;
use crate::inference::{Convergence, PriorMode, SkillPrior};
use crate::learner::{HyperGrid, SemiMode, TrainConfig};
use crate::workers::SamplingParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Files {
        features: PathBuf,
        manifest: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec {
            k: 10,
            n_per_class: 510,
            dim: 32,
            separation: 3.5,
            prototypes_per_class: 10,
            groups: default_groups(10),
            group_separation: 6.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    /// Added OOD items as a fraction of the dataset size.
    pub fraction: f64,
    #[serde(default = "default_ood_separation")]
    pub separation: f64,
}

fn default_ood_separation() -> f64 {
    4.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBank {
    /// Class groups; the dataset's grouping when absent, or contiguous
    /// triples for an ungrouped dataset.
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_bank_workers")]
    pub n_workers_per_group: usize,
    #[serde(default = "default_acc_range")]
    pub within_acc_range: (f64, f64),
}

fn default_bank_workers() -> usize {
    5
}

fn default_acc_range() -> (f64, f64) {
    (0.62, 0.82)
}

impl Default for SyntheticBank {
    fn default() -> Self {
        Self {
            groups: None,
            n_workers_per_group: default_bank_workers(),
            within_acc_range: default_acc_range(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BankSource {
    Synthetic(SyntheticBank),
    File(PathBuf),
}

impl Default for BankSource {
    fn default() -> Self {
        BankSource::Synthetic(SyntheticBank::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Structured,
    /// Symmetric noise at each structured worker's mean accuracy.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerSimConfig {
    pub bank: BankSource,
    pub n_workers: usize,
    pub noise: NoiseMode,
    pub sampling: SamplingParams,
    /// Fraction of items whose only workers give two fixed, distinct,
    /// wrong labels.
    pub contradictory_fraction: f64,
}

impl Default for WorkerSimConfig {
    fn default() -> Self {
        Self {
            bank: BankSource::default(),
            n_workers: 30,
            noise: NoiseMode::Structured,
            sampling: SamplingParams::default(),
            contradictory_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Soft-convergence tolerance on the mean annotation likelihood.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// EM only, no learnt model.
    OnlineDs,
    /// Model prior, calibration by cross-validation on annotated items.
    Lean,
    /// Model prior, calibration on the prototypes.
    LeanStar,
    /// Pseudo-labels, prototype calibration, soft EM, global selection.
    Full,
}

impl Method {
    pub fn switches(self) -> Switches {
        let (learn, calibration, convergence, global_selection) = match self {
            Method::OnlineDs => (false, Calibration::None, Convergence::Hard, false),
            Method::Lean => (true, Calibration::CrossValidation, Convergence::Hard, false),
            Method::LeanStar => (true, Calibration::Prototypes, Convergence::Hard, false),
            Method::Full => (true, Calibration::Prototypes, Convergence::Soft, true),
        };
        Switches {
            learn,
            calibration,
            convergence,
            global_selection,
        }
    }

    /// Semi-supervision for this method. Full keeps an explicit MixMatch
    /// choice and otherwise uses pseudo-labels.
    pub fn semi_mode(self, requested: SemiMode) -> SemiMode {
        match (self, requested) {
            (Method::Full, SemiMode::Mixmatch) => SemiMode::Mixmatch,
            (Method::Full, _) => SemiMode::Pseudo,
            _ => SemiMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub ood: Option<OodConfig>,
    pub worker_sim: WorkerSimConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub train: TrainConfig,
    pub skill_prior: SkillPrior,
    pub assignment: AssignmentConfig,
    pub em: EmConfig,
    pub method: Method,
    /// Grid searched once on the prototypes before the loop starts.
    pub hyper_search: Option<HyperGrid>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            dataset: DatasetSource::default(),
            ood: None,
            worker_sim: WorkerSimConfig::default(),
            loop_cfg: LoopConfig::default(),
            train: TrainConfig::default(),
            skill_prior: SkillPrior::default(),
            assignment: AssignmentConfig::default(),
            em: EmConfig::default(),
            method: Method::Full,
            hyper_search: None,
            seed: 0,
        };
        cfg.train.semi_mode = cfg.method.semi_mode(cfg.train.semi_mode);
        cfg
    }
}

impl ExperimentConfig {
    pub fn settings(&self) -> LoopSettings {
        LoopSettings {
            loop_cfg: self.loop_cfg.clone(),
            train: self.train.clone(),
            prior: self.skill_prior.clone(),
            assignment: self.assignment.clone(),
            em_epsilon: self.em.epsilon,
            em_max_iters: self.em.max_iters,
            switches: self.method.switches(),
        }
    }

    /// Applies the method preset and checks value ranges.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        self.train.semi_mode = self.method.semi_mode(self.train.semi_mode);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.loop_cfg
            .validate()
            .map_err(|(f, m)| ConfigError::new(format!("loop.{f}"), m))?;
        self.train
            .validate()
            .map_err(|m| ConfigError::new("train", m))?;
        let p = &self.skill_prior;
        if !(p.n_beta > 0.0) {
            return Err(ConfigError::new("skill_prior.n_beta", "must be positive"));
        }
        if !(p.alpha_diag > 0.0 && p.alpha_diag < 1.0) {
            return Err(ConfigError::new(
                "skill_prior.alpha_diag",
                "must lie in (0, 1)",
            ));
        }
        if let PriorMode::ClassAware { diagonals } | PriorMode::Both { diagonals, .. } = &p.mode {
            if let Some(d) = diagonals.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
                return Err(ConfigError::new(
                    "skill_prior.mode.diagonals",
                    format!("{d} not in (0, 1)"),
                ));
            }
        }
        if self.assignment.mode == AssignMode::Greedy && self.assignment.alpha_cap == 0 {
            return Err(ConfigError::new(
                "assignment.alpha_cap",
                "must be at least 1",
            ));
        }
        if !(self.em.epsilon > 0.0) {
            return Err(ConfigError::new("em.epsilon", "must be positive"));
        }
        if self.em.max_iters == 0 {
            return Err(ConfigError::new("em.max_iters", "must be at least 1"));
        }
        let w = &self.worker_sim;
        if w.n_workers == 0 {
            return Err(ConfigError::new(
                "worker_sim.n_workers",
                "must be at least 1",
            ));
        }
        if !(0.0..=1.0).contains(&w.sampling.noise_level) {
            return Err(ConfigError::new(
                "worker_sim.sampling.noise_level",
                "must lie in [0, 1]",
            ));
        }
        if !(w.sampling.smooth_ratio >= 0.0) {
            return Err(ConfigError::new(
                "worker_sim.sampling.smooth_ratio",
                "must be non-negative",
            ));
        }
        if !(0.0..1.0).contains(&w.contradictory_fraction) {
            return Err(ConfigError::new(
                "worker_sim.contradictory_fraction",
                "must lie in [0, 1)",
            ));
        }
        if w.contradictory_fraction > 0.0 && w.n_workers < 2 {
            return Err(ConfigError::new(
                "worker_sim.n_workers",
                "contradictory items need 2 workers",
            ));
        }
        if let BankSource::Synthetic(b) = &w.bank {
            let (lo, hi) = b.within_acc_range;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(ConfigError::new(
                    "worker_sim.bank.synthetic.within_acc_range",
                    "need 0 <= lo <= hi <= 1",
                ));
            }
            if b.n_workers_per_group == 0 {
                return Err(ConfigError::new(
                    "worker_sim.bank.synthetic.n_workers_per_group",
                    "must be at least 1",
                ));
            }
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.k < 2 || s.dim == 0 || s.n_per_class <= s.prototypes_per_class {
                return Err(ConfigError::new(
                    "dataset.synthetic",
                    "need k >= 2, dim >= 1 and more items per class than prototypes",
                ));
            }
        }
        if let Some(o) = &self.ood {
            if !(o.fraction >= 0.0) {
                return Err(ConfigError::new("ood.fraction", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Contiguous groups of three classes; a leftover single class joins the
/// last group.
pub fn default_groups(k: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..k)
        .collect::<Vec<_>>()
        .chunks(3)
        .map(<[usize]>::to_vec)
        .collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }
    groups
}

/// Parses, fills defaults, applies the method preset and validates.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(raw);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(path, e.into_inner().to_string())
    })?;
    cfg.resolve()
}
