use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crowdloop_core::config::{default_groups, ExperimentConfig};
use crowdloop_core::dataset::{self, SyntheticSpec};
use crowdloop_core::experiment;
use crowdloop_core::metrics;
use crowdloop_core::par;

/// Simulated human-in-the-loop annotation with online truth inference.
#[derive(Debug, Parser)]
#[command(name = "crowdloop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a class-conditional Gaussian dataset (features.bin + manifest.json).
    GenSynthetic(GenArgs),
    /// Sample the worker pool described by a config and write it as JSON.
    SimulateWorkers(SimArgs),
    /// Run an annotation experiment.
    Run(RunArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 510)]
    n_per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Distance between class means (within a group when grouped).
    #[arg(long, default_value_t = 3.5)]
    separation: f64,
    /// Distance between centres of contiguous class triples; 0 leaves the
    /// classes ungrouped.
    #[arg(long, default_value_t = 6.0)]
    group_separation: f64,
    #[arg(long, default_value_t = 10)]
    prototypes_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for intra-step parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory written by `run`.
    #[arg(long)]
    run: PathBuf,
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = experiment::load_config(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_synthetic(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        k: a.k,
        n_per_class: a.n_per_class,
        dim: a.dim,
        separation: a.separation,
        prototypes_per_class: a.prototypes_per_class,
        groups: if a.group_separation > 0.0 {
            default_groups(a.k)
        } else {
            vec![]
        },
        group_separation: a.group_separation,
    };
    let (manifest, features) = dataset::gen_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    dataset::write_features(&a.out.join("features.bin"), &features)?;
    dataset::write_manifest(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} items ({} dims) to {}",
        manifest.len(),
        features.dim(),
        a.out.display()
    );
    Ok(())
}

fn simulate_workers(a: &SimArgs) -> Result<()> {
    let cfg = load(&a.config, a.seed)?;
    let prepared = experiment::prepare(&cfg)?;
    let workers: Vec<serde_json::Value> = prepared
        .workers
        .iter()
        .map(|w| {
            serde_json::json!({
                "worker_id": w.worker_id,
                "rng_seed": w.rng_seed,
                "confusion": w.confusion,
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&workers)? + "\n";
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} workers to {}", workers.len(), a.out.display());
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = load(&a.config, a.seed)?;
    let out = a.out.clone();
    par::with_jobs(a.jobs, move || -> Result<()> {
        let result = experiment::run_experiment(&cfg)?;
        experiment::write_outputs(&cfg, &result, &out)?;
        println!("{}", serde_json::to_string(&result.summary)?);
        Ok(())
    })
}

fn report(a: &ReportArgs) -> Result<()> {
    let path = a.run.join("metrics.csv");
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let rows = metrics::read_csv(file)?;
    let summary = metrics::summarize(&rows)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:>5} {:>10} {:>8} {:>8} {:>9}",
        "step", "ann/img", "top1", "top5", "finished"
    );
    for r in &rows {
        println!(
            "{:>5} {:>10.4} {:>8} {:>8} {:>9}",
            r.step,
            r.annotations_per_image,
            fmt(r.top1),
            fmt(r.top5),
            r.finished_size
        );
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROWDLOOP_LOG", "error"))
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::SimulateWorkers(a) => simulate_workers(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("usage: crowdloop <gen-synthetic|simulate-workers|run|report> [OPTIONS]; see --help");
            ExitCode::FAILURE
        }
    }
}
