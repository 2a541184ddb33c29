//! Acceptance checks. Runs as a plain binary (`harness = false`) so each
//! criterion prints one PASS/FAIL line; exits non-zero if any fail.

mod common;

use std::fs;
use std::time::Instant;

use rand::Rng as _;

use common::{plurality, uniform};
use crowdloop_core::annotation_loop::StopReason;
use crowdloop_core::config::{default_groups, ExperimentConfig, Method, NoiseMode};
use crowdloop_core::experiment::{run_experiment, write_outputs, ExperimentOutcome};
use crowdloop_core::inference::{
    argmax, e_step, m_step, Confusion, LabelState, Observations, SkillPrior, WorkerSkill,
};
use crowdloop_core::learner::softmax_scaled;
use crowdloop_core::rng;
use crowdloop_core::workers::{
    annotate, make_skill_bank_synthetic, sample_confusion_matrix, SamplingParams,
};

const SEEDS: u64 = 5;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<String, String>) {
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.2}s)");
            }
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn skill(id: &str, rows: Vec<Vec<f64>>) -> WorkerSkill {
    WorkerSkill {
        worker_id: id.into(),
        confusion: Confusion::from_rows(rows).unwrap(),
        annotation_count: 0,
    }
}

fn em_micro_oracle() -> Result<String, String> {
    let w = skill("a", vec![vec![0.8, 0.2], vec![0.3, 0.7]]);
    let mut worst = 0.0f64;
    let mut cmp = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let one = Observations::from_triples(1, 1, 2, &[(0, 0, 0)]);
    let l = e_step(&one, &[w.clone()], &uniform(1, 2)).map_err(|e| e.to_string())?;
    cmp(l[0].posterior[0], 8.0 / 11.0);
    cmp(l[0].posterior[1], 3.0 / 11.0);

    let two = Observations::from_triples(1, 1, 2, &[(0, 0, 0), (0, 0, 0)]);
    let l = e_step(&two, &[w], &uniform(1, 2)).map_err(|e| e.to_string())?;
    cmp(l[0].posterior[0], 0.64 / 0.73);
    cmp(l[0].posterior[1], 0.09 / 0.73);

    let obs = Observations::from_triples(3, 1, 2, &[(0, 0, 0), (1, 0, 0), (2, 0, 0)]);
    let labels = vec![LabelState::from_posterior(vec![1.0, 0.0], 1); 3];
    let s = m_step(&obs, &labels, &SkillPrior::default(), &["a".to_string()]);
    cmp(s[0].confusion.get(0, 0), 10.0 / 13.0);
    cmp(s[0].confusion.get(0, 1), 3.0 / 13.0);

    ensure(worst <= 1e-9, || format!("max error {worst:e}"))?;
    Ok(format!("max error {worst:e}"))
}

fn majority_vote() -> Result<String, String> {
    let mut r = rng::stream(0, "acceptance.majority");
    for case in 0..1000 {
        let n = r.gen_range(1..=10);
        let m = r.gen_range(1..=5);
        let k = r.gen_range(2..=4);
        let mut triples = vec![];
        for i in 0..n {
            for j in 0..m {
                if r.gen_bool(0.7) {
                    triples.push((i, j, r.gen_range(0..k)));
                }
            }
        }
        let margin = r.gen_range(0.01..0.9);
        let off = (1.0 - margin) / k as f64;
        let conf = Confusion::symmetric(k, 1.0 - off * (k - 1) as f64);
        let skills: Vec<WorkerSkill> = (0..m)
            .map(|j| WorkerSkill {
                worker_id: format!("w{j}"),
                confusion: conf.clone(),
                annotation_count: 0,
            })
            .collect();
        let obs = Observations::from_triples(n, m, k, &triples);
        let labels = e_step(&obs, &skills, &uniform(n, k)).map_err(|e| e.to_string())?;
        for (i, l) in labels.iter().enumerate() {
            let want = plurality(obs.item(i).iter().map(|&(_, z)| z), k);
            ensure(l.aggregated == want, || {
                format!("case {case} item {i}: {} vs plurality {want}", l.aggregated)
            })?;
        }
    }
    Ok("1000 instances".into())
}

fn gradient_check() -> Result<String, String> {
    let worst = (0..100).map(common::gradient_check).fold(0.0f64, f64::max);
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 nets, max relative error {worst:e}"))
}

fn argmax_invariance() -> Result<String, String> {
    let mut r = rng::stream(0, "acceptance.argmax");
    for case in 0..10_000 {
        let k = r.gen_range(2..=20);
        let logits: Vec<f64> = (0..k).map(|_| r.gen_range(-30.0..30.0)).collect();
        let t = r.gen_range(-3.0f64..3.0).exp();
        ensure(
            argmax(&logits) == argmax(&softmax_scaled(&logits, t)),
            || format!("case {case}: argmax moved at T = {t}"),
        )?;
    }
    Ok("10000 vectors".into())
}

fn simulator_invariants() -> Result<String, String> {
    let k = 10;
    let groups = default_groups(k);
    let classes: Vec<usize> = (0..k).collect();
    let bank =
        make_skill_bank_synthetic(k, &groups, 5, (0.62, 0.82), 0).map_err(|e| e.to_string())?;
    let noisy = SamplingParams::default();
    let clean = SamplingParams {
        noise_level: 0.0,
        ..noisy
    };
    // Same stream with and without noise: the noiseless draw is the matrix
    // the redistribution step starts from.
    let mut r_noisy = rng::stream(1, "acceptance.sim");
    let mut r_clean = rng::stream(1, "acceptance.sim");
    let mut sum_err = 0.0f64;
    let mut formula_err = 0.0f64;
    let mut pool = vec![];
    for _ in 0..1000 {
        let cm = sample_confusion_matrix(&bank, noisy, &classes, &groups, &mut r_noisy)
            .map_err(|e| e.to_string())?;
        let pre = sample_confusion_matrix(&bank, clean, &classes, &groups, &mut r_clean)
            .map_err(|e| e.to_string())?;
        let m_pre = common::within_group_mass(&pre, &classes, &groups);
        let m_post = common::within_group_mass(&cm, &classes, &groups);
        let s_pre = common::row_sums(&pre);
        for (y, s) in common::row_sums(&cm).into_iter().enumerate() {
            sum_err = sum_err.max((s - 1.0).abs());
            let want = (s_pre[y] - m_pre[y]) + noisy.noise_level * m_pre[y];
            formula_err = formula_err.max(((s - m_post[y]) - want).abs());
        }
        pool.push(cm);
    }
    ensure(sum_err <= 1e-6, || format!("row sum error {sum_err:e}"))?;
    ensure(formula_err <= 1e-9, || {
        format!("formula error {formula_err:e}")
    })?;

    let n = 100_000;
    let mut freq_err = 0.0f64;
    let mut r = rng::stream(2, "acceptance.annotate");
    for (j, cm) in pool.iter().take(20).enumerate() {
        let w = crowdloop_core::workers::SimWorker {
            worker_id: format!("w{j}"),
            confusion: cm.clone(),
            rng_seed: j as u64,
        };
        for y in 0..k {
            let mut counts = vec![0usize; k];
            for _ in 0..n {
                counts[annotate(&w, y, &mut r)] += 1;
            }
            for z in 0..k {
                freq_err = freq_err.max((counts[z] as f64 / n as f64 - cm.get(y, z)).abs());
            }
        }
    }
    ensure(freq_err <= 0.01, || format!("frequency error {freq_err}"))?;
    Ok(format!(
        "row sums {sum_err:.1e}, formula {formula_err:.1e}, frequencies {freq_err:.4}"
    ))
}

fn config(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        seed,
        ..ExperimentConfig::default()
    };
    cfg.train.hidden_dim = 64;
    cfg.train.epochs = 20;
    cfg.resolve().unwrap()
}

fn cost_at_80(run: &ExperimentOutcome) -> Option<f64> {
    run.summary.ann_per_image_at.get("0.8").copied().flatten()
}

/// Seed-averaged annotations per image at 80% top-1; `None` if any seed
/// never got there.
fn mean_cost(cfgs: impl Iterator<Item = ExperimentConfig>) -> Result<Option<f64>, String> {
    let mut costs = vec![];
    for cfg in cfgs {
        let run = run_experiment(&cfg).map_err(|e| e.to_string())?;
        match cost_at_80(&run) {
            Some(c) => costs.push(c),
            None => return Ok(None),
        }
    }
    Ok(Some(costs.iter().sum::<f64>() / costs.len() as f64))
}

fn fmt_cost(c: Option<f64>) -> String {
    c.map_or("never".into(), |c| format!("{c:.3}"))
}

fn main() {
    let mut report = Report { failed: 0 };
    report.check("em micro-oracle", em_micro_oracle);
    report.check("majority-vote equivalence", majority_vote);
    report.check("gradient check", gradient_check);
    report.check("calibration argmax invariance", argmax_invariance);
    report.check("simulator invariants", simulator_invariants);

    let mut full_structured = None;
    report.check("directional efficiency", || {
        let cost = |m: Method| mean_cost((0..SEEDS).map(|s| config(m, s)));
        let online = cost(Method::OnlineDs)?;
        let lean = cost(Method::Lean)?;
        let full = cost(Method::Full)?;
        full_structured = Some(full);
        let detail = format!(
            "ann/img at 80%: online_ds {}, lean {}, full {}",
            fmt_cost(online),
            fmt_cost(lean),
            fmt_cost(full)
        );
        match (online, lean, full) {
            (Some(o), Some(l), Some(f)) if f <= 0.6 * o && l <= 0.85 * o => Ok(detail),
            _ => Err(detail),
        }
    });

    report.check("uniform vs structured gap", || {
        let structured = match full_structured {
            Some(c) => c,
            None => mean_cost((0..SEEDS).map(|s| config(Method::Full, s)))?,
        };
        let uniform = mean_cost((0..SEEDS).map(|s| {
            let mut cfg = config(Method::Full, s);
            cfg.worker_sim.noise = NoiseMode::Uniform;
            cfg
        }))?;
        let detail = format!(
            "ann/img at 80%: uniform {}, structured {}",
            fmt_cost(uniform),
            fmt_cost(structured)
        );
        match (uniform, structured) {
            (Some(u), Some(s)) if u < s => Ok(detail),
            _ => Err(detail),
        }
    });

    report.check("stopping with contradictory pools", || {
        let mut cfg = config(Method::Full, 0);
        cfg.worker_sim.contradictory_fraction = 0.05;
        let run = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let o = &run.outcome;
        let most = (0..o.obs.n_items())
            .map(|i| o.obs.item(i).len())
            .max()
            .unwrap_or(0);
        let detail = format!(
            "{:?} after {} steps, residual {}, max annotations {most}",
            o.stop_reason,
            o.steps,
            o.residual.len()
        );
        ensure(
            o.stop_reason == StopReason::Patience && !o.residual.is_empty() && most <= 3,
            || detail.clone(),
        )?;
        Ok(detail)
    });

    report.check("determinism", || {
        let cfg = config(Method::Full, 0);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for name in ["a", "b"] {
            let run = run_experiment(&cfg).map_err(|e| e.to_string())?;
            write_outputs(&cfg, &run, &dir.path().join(name)).map_err(|e| e.to_string())?;
        }
        for file in ["metrics.csv", "annotations.jsonl", "summary.json"] {
            let a = fs::read(dir.path().join("a").join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(dir.path().join("b").join(file)).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{file} differs"))?;
        }
        Ok("metrics.csv, annotations.jsonl, summary.json identical".into())
    });

    println!("{} criteria failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
