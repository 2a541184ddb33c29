//! End-to-end run: build the dataset and worker pool from a config, run the
//! annotation loop and write the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;

use crate::annotation_loop::{AnnotationLoop, LoopOutcome, SimAnnotator, Task};
use crate::assignment::{worker_importance, ItemPools, IMPORTANCE_FORMULA};
use crate::config::{default_groups, BankSource, DatasetSource, ExperimentConfig, NoiseMode};
use crate::dataset::{self, FeatureStore, Manifest, PrototypeSplit};
use crate::error::{ConfigError, DatasetError, Error, Result};
use crate::inference::argmax;
use crate::learner::{self, hyperparam_search, to_f64_rows, MlpParams, TrainConfig};
use crate::metrics::{self, Summary};
use crate::rng;
use crate::workers::{self, SimWorker, SkillBank};

/// Everything the loop needs, built deterministically from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: Manifest,
    pub features: FeatureStore,
    pub split: PrototypeSplit,
    /// Annotatable (non-prototype) items as manifest indices.
    pub pool: Vec<usize>,
    pub workers: Vec<SimWorker>,
    /// Pool-local (item, worker) pairs with a fixed answer.
    pub fixed: BTreeMap<(usize, usize), usize>,
    pub pools: ItemPools,
    pub train: TrainConfig,
}

impl Prepared {
    pub fn classes(&self) -> usize {
        self.manifest.total_classes()
    }

    pub fn labeled(&self, items: &[usize]) -> Vec<(usize, usize)> {
        items
            .iter()
            .filter_map(|&i| self.manifest.items[i].true_label.map(|y| (i, y)))
            .collect()
    }
}

pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<(Manifest, FeatureStore)> {
    let (m, f) = match source {
        DatasetSource::Synthetic(spec) => {
            dataset::gen_synthetic(spec, rng::derive(seed, "dataset"))?
        }
        DatasetSource::Files { features, manifest } => (
            dataset::load_manifest(manifest)?,
            dataset::load_features(features)?,
        ),
    };
    m.validate()?;
    if m.len() != f.n_items() {
        return Err(ConfigError::new(
            "dataset",
            format!(
                "manifest has {} items but features have {}",
                m.len(),
                f.n_items()
            ),
        )
        .into());
    }
    Ok((m, f))
}

fn read_bank(path: &Path) -> Result<SkillBank> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let bank: SkillBank = serde_path_to_error::deserialize(de)
        .map_err(|e| ConfigError::new(format!("bank:{}", e.path()), e.into_inner().to_string()))?;
    bank.validate()?;
    Ok(bank)
}

/// Structured workers over the manifest's target classes, converted to
/// uniform noise or extended with the OOD class as configured.
pub fn build_workers(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<Vec<SimWorker>> {
    let k = manifest.k();
    let ws = &cfg.worker_sim;
    let (bank, targets) = match &ws.bank {
        BankSource::Synthetic(b) => {
            let groups = b.groups.clone().unwrap_or_else(|| {
                if manifest.groups.iter().any(|g| g.len() > 1) {
                    manifest.groups.clone()
                } else {
                    default_groups(k)
                }
            });
            let bank = workers::make_skill_bank_synthetic(
                k,
                &groups,
                b.n_workers_per_group,
                b.within_acc_range,
                rng::derive(cfg.seed, "bank"),
            )?;
            (bank, (0..k).collect::<Vec<_>>())
        }
        BankSource::File(path) => {
            let bank = read_bank(path)?;
            let targets = manifest
                .class_names
                .iter()
                .map(|name| {
                    bank.classes.iter().position(|c| c == name).ok_or_else(|| {
                        ConfigError::new(
                            "worker_sim.bank.file",
                            format!("class {name:?} missing from bank"),
                        )
                    })
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (bank, targets)
        }
    };
    let mut pool = workers::sample_pool(
        &bank,
        ws.sampling,
        &targets,
        &bank.groups,
        ws.n_workers,
        rng::derive(cfg.seed, "workers"),
    )?;
    if ws.noise == NoiseMode::Uniform {
        pool = workers::uniform_counterparts(&pool)?;
    }
    if manifest.has_ood_class {
        for w in &mut pool {
            w.confusion = workers::extend_with_ood(&w.confusion);
        }
    }
    Ok(pool)
}

/// Picks `ceil(fraction * n)` pool items; each may only be labeled by two
/// workers who answer `truth + 1` and `truth + 2` (mod classes).
pub fn contradictory_items(
    truth: &[usize],
    classes: usize,
    n_workers: usize,
    fraction: f64,
    seed: u64,
) -> (ItemPools, BTreeMap<(usize, usize), usize>) {
    let mut pools = ItemPools::new();
    let mut fixed = BTreeMap::new();
    let n = (fraction * truth.len() as f64).ceil() as usize;
    if n == 0 || n_workers < 2 {
        return (pools, fixed);
    }
    let mut r = rng::stream(seed, "experiment.contradictory");
    let mut chosen = index::sample(&mut r, truth.len(), n.min(truth.len())).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let a = r.gen_range(0..n_workers);
        let b = (a + r.gen_range(1..n_workers)) % n_workers;
        fixed.insert((i, a), (truth[i] + 1) % classes);
        fixed.insert((i, b), (truth[i] + 2) % classes);
        pools.insert(i, vec![a.min(b), a.max(b)]);
    }
    (pools, fixed)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (mut manifest, mut features) = load_dataset(&cfg.dataset, cfg.seed)?;
    if let Some(ood) = &cfg.ood {
        if !manifest.has_ood_class {
            (manifest, features) = workers::inject_ood(
                &manifest,
                &features,
                ood.fraction,
                ood.separation,
                rng::derive(cfg.seed, "ood"),
            )?;
        }
    }
    let split = dataset::prototype_split(&manifest)?;
    let pool: Vec<usize> = (0..manifest.len())
        .filter(|&i| !manifest.items[i].is_prototype)
        .collect();
    let workers = build_workers(cfg, &manifest)?;
    let truth: Vec<usize> = pool
        .iter()
        .map(|&i| manifest.items[i].true_label)
        .collect::<Option<_>>()
        .ok_or_else(|| {
            ConfigError::new("dataset", "simulation needs a true label for every item")
        })?;
    let (pools, fixed) = contradictory_items(
        &truth,
        manifest.total_classes(),
        workers.len(),
        cfg.worker_sim.contradictory_fraction,
        cfg.seed,
    );
    let mut prepared = Prepared {
        manifest,
        features,
        split,
        pool,
        workers,
        fixed,
        pools,
        train: cfg.train.clone(),
    };
    if let Some(grid) = &cfg.hyper_search {
        if cfg.method.switches().learn {
            let lattice = grid.lattice(&cfg.train);
            let chosen = hyperparam_search(
                &lattice,
                &prepared.features,
                prepared.classes(),
                &prepared.labeled(&prepared.split.train),
                &prepared.labeled(&prepared.split.val),
            )?;
            log::info!(
                "hyperparameter search: lr_ratio {}, weight_decay {}, mu {}, gamma {}",
                chosen.lr_ratio,
                chosen.weight_decay,
                chosen.mu,
                chosen.gamma
            );
            prepared.train = chosen;
        }
    }
    Ok(prepared)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub prepared: Prepared,
    pub outcome: LoopOutcome,
    pub summary: Summary,
    pub importance: Vec<f64>,
}

/// Per-class accuracy of `model` on the validation prototypes; classes
/// without prototypes count as 1.
pub fn per_class_accuracy(
    model: &MlpParams,
    features: &FeatureStore,
    val: &[(usize, usize)],
    k: usize,
) -> Vec<f64> {
    let mut hits = vec![0usize; k];
    let mut n = vec![0usize; k];
    let xs = to_f64_rows(features, val.iter().map(|&(i, _)| i));
    for (x, &(_, y)) in xs.iter().zip(val) {
        n[y] += 1;
        hits[y] += usize::from(argmax(&model.logits(x)) == y);
    }
    n.iter()
        .zip(&hits)
        .map(|(&n, &h)| if n == 0 { 1.0 } else { h as f64 / n as f64 })
        .collect()
}

pub fn run_prepared(cfg: &ExperimentConfig, prepared: Prepared) -> Result<ExperimentOutcome> {
    let classes = prepared.classes();
    let m = &prepared.manifest;
    let task = Task {
        features: &prepared.features,
        classes,
        target_classes: m.has_ood_class.then(|| m.k()),
        items: prepared.pool.clone(),
        item_ids: prepared
            .pool
            .iter()
            .map(|&i| m.items[i].id.clone())
            .collect(),
        truth: prepared
            .pool
            .iter()
            .map(|&i| m.items[i].true_label)
            .collect(),
        val: prepared.labeled(&prepared.split.val),
    };
    let truth: Vec<usize> = task.truth.iter().map(|t| t.unwrap_or(0)).collect();
    let annotator = SimAnnotator::new(prepared.workers.clone(), truth, prepared.fixed.clone());
    let mut settings = cfg.settings();
    settings.train = prepared.train.clone();
    let worker_ids = prepared
        .workers
        .iter()
        .map(|w| w.worker_id.clone())
        .collect();
    let val = task.val.clone();
    let lp = AnnotationLoop::new(
        task,
        settings,
        worker_ids,
        prepared.pools.clone(),
        annotator,
        cfg.seed,
    )?;
    let outcome = lp.run()?;
    log::info!(
        "stopped after {} steps: {:?}",
        outcome.steps,
        outcome.stop_reason
    );
    let summary = metrics::summarize(&outcome.metrics)?;
    let acc = match &outcome.model {
        Some(model) => per_class_accuracy(model, &prepared.features, &val, classes),
        None => vec![1.0; classes],
    };
    let importance = worker_importance(&outcome.obs, &outcome.labels, &outcome.skills, &acc);
    Ok(ExperimentOutcome {
        prepared,
        outcome,
        summary,
        importance,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, prepared)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(io_err(path))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Files written by [`write_outputs`].
pub const OUTPUT_FILES: [&str; 6] = [
    "config.json",
    "metrics.csv",
    "summary.json",
    "annotations.jsonl",
    "residual_unfinished.csv",
    "worker_importance.csv",
];

pub fn write_outputs(
    cfg: &ExperimentConfig,
    run: &ExperimentOutcome,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join("config.json"), cfg)?;
    metrics::emit_curves(&run.outcome.metrics, out_dir)?;

    let path = out_dir.join("annotations.jsonl");
    let mut w = create(&path)?;
    run.outcome.log.write_jsonl(&mut w).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("residual_unfinished.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let item_ids: Vec<&str> = run
        .prepared
        .pool
        .iter()
        .map(|&i| run.prepared.manifest.items[i].id.as_str())
        .collect();
    w.write_record(["item", "aggregated", "risk", "annotations"])
        .map_err(metrics_csv)?;
    for &i in &run.outcome.residual {
        let l = &run.outcome.labels[i];
        w.write_record([
            item_ids[i].to_string(),
            l.aggregated.to_string(),
            l.risk.to_string(),
            l.annotation_count.to_string(),
        ])
        .map_err(metrics_csv)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("worker_importance.csv");
    let mut w = create(&path)?;
    let mut body = format!("# {IMPORTANCE_FORMULA}\nworker,importance,annotations,mean_diagonal\n");
    for (s, imp) in run.outcome.skills.iter().zip(&run.importance) {
        body.push_str(&format!(
            "{},{},{},{}\n",
            s.worker_id,
            imp,
            s.annotation_count,
            s.confusion.mean_diagonal()
        ));
    }
    w.write_all(body.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;

    if let Some(model) = &run.outcome.model {
        let (header, flat) = model.checkpoint();
        write_json(&out_dir.join("model.json"), &header)?;
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = out_dir.join("model.bin");
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    if run.prepared.train != cfg.train {
        write_json(&out_dir.join("hyper_search.json"), &run.prepared.train)?;
    }
    Ok(())
}

fn metrics_csv(e: csv::Error) -> Error {
    Error::Metrics(e.into())
}

/// Loads an echoed or hand-written config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(crate::config::validate_config(&text)?)
}

/// Model checkpoint reader, the inverse of the `model.bin`/`model.json` pair.
pub fn read_checkpoint(dir: &Path) -> Result<MlpParams> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let header: learner::CheckpointHeader = serde_json::from_str(&text)?;
    let path = dir.join("model.bin");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let theta: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let n = header.dim * header.hidden
        + header.hidden
        + header.hidden * header.classes
        + header.classes;
    if theta.len() != n {
        return Err(DatasetError::TruncatedFile {
            expected: n * 4,
            found: bytes.len(),
        }
        .into());
    }
    Ok(
        MlpParams::from_theta(header.dim, header.hidden, header.classes, theta)
            .with_temperature(header.temperature),
    )
}
