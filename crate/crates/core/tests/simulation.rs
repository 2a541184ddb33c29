mod common;

use proptest::prelude::*;

use crowdloop_core::assignment::{assign_greedy, ItemPools};
use crowdloop_core::config::default_groups;
use crowdloop_core::dataset::{gen_synthetic, SyntheticSpec};
use crowdloop_core::inference::{Confusion, LabelState, Observations, WorkerSkill};
use crowdloop_core::rng;
use crowdloop_core::workers::{
    add_group_noise, annotate, inject_ood, make_skill_bank_synthetic, make_uniform_worker,
    sample_confusion_matrix, sample_pool, uniform_counterparts, BankWorker, SamplingParams,
    SimWorker, SkillBank,
};

fn bank() -> SkillBank {
    make_skill_bank_synthetic(10, &default_groups(10), 5, (0.62, 0.82), 3).unwrap()
}

fn row_entropy_off_diagonal(row: &[f64], y: usize) -> f64 {
    let off: f64 = row
        .iter()
        .enumerate()
        .filter(|(z, _)| *z != y)
        .map(|(_, v)| v)
        .sum();
    row.iter()
        .enumerate()
        .filter(|(z, v)| *z != y && **v > 0.0)
        .map(|(_, v)| {
            let q = v / off;
            -q * q.ln()
        })
        .sum()
}

#[test]
fn uniform_worker_examples() {
    let w = make_uniform_worker(2, 0.76, 0).unwrap();
    assert_eq!(w.confusion.rows(), vec![vec![0.76, 0.24], vec![0.24, 0.76]]);
    let w = make_uniform_worker(19, 0.43, 0).unwrap();
    assert!((w.confusion.get(0, 1) - 0.57 / 18.0).abs() < 1e-12);
    assert!((w.confusion.get(0, 1) - 0.0317).abs() < 1e-4);
    assert_eq!(
        make_uniform_worker(3, 1.0, 0).unwrap().confusion,
        Confusion::identity(3)
    );
}

#[test]
fn sampled_rows_follow_the_redistribution_formula() {
    let b = bank();
    let groups = default_groups(10);
    let classes: Vec<usize> = (0..10).collect();
    let noisy = SamplingParams::default();
    let clean = SamplingParams {
        noise_level: 0.0,
        ..noisy
    };
    let mut r_noisy = rng::stream(5, "t");
    let mut r_clean = rng::stream(5, "t");
    for _ in 0..200 {
        let cm = sample_confusion_matrix(&b, noisy, &classes, &groups, &mut r_noisy).unwrap();
        let pre = sample_confusion_matrix(&b, clean, &classes, &groups, &mut r_clean).unwrap();
        let m = common::within_group_mass(&pre, &classes, &groups);
        let sums_pre = common::row_sums(&pre);
        let m_post = common::within_group_mass(&cm, &classes, &groups);
        for (y, s) in common::row_sums(&cm).iter().enumerate() {
            assert!((s - 1.0).abs() < 1e-6);
            let out_post = s - m_post[y];
            let out_pre = sums_pre[y] - m[y];
            assert!((out_post - (out_pre + m[y] * 0.03)).abs() < 1e-9);
            assert!((out_post - ((1.0 - m[y]) + m[y] * 0.03)).abs() < 1e-7);
        }
    }
}

#[test]
fn single_worker_bank_without_smoothing() {
    let matrix = Confusion::from_rows(vec![
        vec![6.0, 2.0, 2.0, 0.0],
        vec![1.0, 3.0, 0.0, 0.0],
        vec![0.0, 0.0, 5.0, 5.0],
        vec![0.0, 0.0, 1.0, 3.0],
    ])
    .unwrap();
    let b = SkillBank {
        classes: (0..4).map(|c| c.to_string()).collect(),
        groups: vec![vec![0, 1, 2, 3]],
        workers: vec![BankWorker { group: 0, matrix }],
    };
    let groups = vec![vec![0, 1], vec![2, 3]];
    let params = SamplingParams {
        smooth_ratio: 0.0,
        noise_level: 0.1,
    };
    let targets = [0, 1, 2];
    let cm =
        sample_confusion_matrix(&b, params, &targets, &groups, &mut rng::stream(0, "t")).unwrap();
    // Restrict to classes 0..3, normalize with the 1e-8 guard, then noise.
    let want = [
        [
            0.9 * 6.0 / (10.0 + 1e-8),
            0.9 * 2.0 / (10.0 + 1e-8),
            2.0 / (10.0 + 1e-8) + 0.1 * 8.0 / (10.0 + 1e-8),
        ],
        [
            0.9 * 1.0 / (4.0 + 1e-8),
            0.9 * 3.0 / (4.0 + 1e-8),
            0.1 * 4.0 / (4.0 + 1e-8),
        ],
        [
            0.05 * 5.0 / (5.0 + 1e-8),
            0.05 * 5.0 / (5.0 + 1e-8),
            0.9 * 5.0 / (5.0 + 1e-8),
        ],
    ];
    for y in 0..3 {
        for z in 0..3 {
            assert!((cm.get(y, z) - want[y][z]).abs() < 1e-12, "({y},{z})");
        }
    }
}

#[test]
fn noise_on_an_identity_bank() {
    let b = SkillBank {
        classes: (0..4).map(|c| c.to_string()).collect(),
        groups: vec![vec![0, 1], vec![2, 3]],
        workers: vec![
            BankWorker {
                group: 0,
                matrix: Confusion::identity(4),
            },
            BankWorker {
                group: 1,
                matrix: Confusion::identity(4),
            },
        ],
    };
    let groups = b.groups.clone();
    let cm = sample_confusion_matrix(
        &b,
        SamplingParams {
            smooth_ratio: 1.0,
            noise_level: 0.0,
        },
        &[0, 1, 2, 3],
        &groups,
        &mut rng::stream(0, "t"),
    )
    .unwrap();
    for y in 0..4 {
        assert!((cm.get(y, y) - 1.0).abs() < 1e-8);
    }
    // Within-group mass split evenly over the pair, then 10% noise.
    let mut half = Confusion::from_rows(vec![
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 0.5, 0.5],
        vec![0.0, 0.0, 0.5, 0.5],
    ])
    .unwrap();
    add_group_noise(&mut half, &[0, 1, 2, 3], &groups, 0.1);
    assert_eq!(half.row(0), &[0.45, 0.45, 0.05, 0.05]);
}

#[test]
fn annotate_frequencies_match_rows() {
    let pool = sample_pool(
        &bank(),
        SamplingParams::default(),
        &(0..10).collect::<Vec<_>>(),
        &default_groups(10),
        3,
        9,
    )
    .unwrap();
    for w in &pool {
        let mut r = rng::stream(w.rng_seed, "annotate");
        for y in 0..10 {
            let n = 100_000;
            let mut counts = [0usize; 10];
            for _ in 0..n {
                counts[annotate(w, y, &mut r)] += 1;
            }
            for z in 0..10 {
                let f = counts[z] as f64 / n as f64;
                assert!((f - w.confusion.get(y, z)).abs() < 0.01);
            }
        }
    }
}

#[test]
fn bank_structure() {
    let b = bank();
    let groups = default_groups(10);
    let mut diag = vec![];
    for w in &b.workers {
        for y in 0..10 {
            let g = &groups[w.group];
            if !g.contains(&y) {
                assert!(w.matrix.row(y).iter().all(|v| *v == 0.0));
                continue;
            }
            diag.push(w.matrix.get(y, y));
            for z in 0..10 {
                if !g.contains(&z) {
                    assert_eq!(w.matrix.get(y, z), 0.0);
                }
            }
        }
    }
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    assert!((mean - 0.72).abs() < 0.03, "mean diagonal {mean}");

    let perfect = make_skill_bank_synthetic(10, &groups, 2, (1.0, 1.0), 0).unwrap();
    assert!(perfect
        .workers
        .iter()
        .all(|w| (0..10).all(|y| { !groups[w.group].contains(&y) || w.matrix.get(y, y) == 1.0 })));
}

#[test]
fn sampled_pool_mean_accuracy_is_near_seventy_percent() {
    let pool = sample_pool(
        &bank(),
        SamplingParams::default(),
        &(0..10).collect::<Vec<_>>(),
        &default_groups(10),
        30,
        1,
    )
    .unwrap();
    let mean = pool
        .iter()
        .map(|w| w.confusion.mean_diagonal())
        .sum::<f64>()
        / 30.0;
    assert!((mean - 0.70).abs() < 0.03, "mean accuracy {mean}");
}

#[test]
fn structured_rows_have_lower_off_diagonal_entropy() {
    let pool = sample_pool(
        &bank(),
        SamplingParams::default(),
        &(0..10).collect::<Vec<_>>(),
        &default_groups(10),
        30,
        2,
    )
    .unwrap();
    let uniform = uniform_counterparts(&pool).unwrap();
    for (s, u) in pool.iter().zip(&uniform) {
        assert!((s.confusion.mean_diagonal() - u.confusion.mean_diagonal()).abs() < 1e-12);
        for y in 0..10 {
            assert!(
                row_entropy_off_diagonal(s.confusion.row(y), y)
                    < row_entropy_off_diagonal(u.confusion.row(y), y)
            );
        }
    }
}

#[test]
fn ood_injection_examples() {
    let spec = SyntheticSpec {
        k: 3,
        n_per_class: 4,
        dim: 4,
        separation: 2.0,
        prototypes_per_class: 2,
        groups: vec![],
        group_separation: 0.0,
    };
    let (m, f) = gen_synthetic(&spec, 0).unwrap();
    let (m0, f0) = inject_ood(&m, &f, 0.0, 4.5, 0).unwrap();
    assert_eq!((m0, f0), (m.clone(), f.clone()));
    let (m1, f1) = inject_ood(&m, &f, 1.0, 4.5, 0).unwrap();
    assert_eq!(m1.len(), 2 * m.len());
    assert_eq!(f1.n_items(), 2 * f.n_items());
    assert!(m1.has_ood_class);
    assert!(m1.items[m.len()..]
        .iter()
        .all(|it| it.true_label == Some(3)));
}

fn skills_with_diagonals(diags: &[f64], k: usize) -> Vec<WorkerSkill> {
    diags
        .iter()
        .enumerate()
        .map(|(j, &d)| WorkerSkill {
            worker_id: format!("w{j}"),
            confusion: Confusion::symmetric(k, d),
            annotation_count: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_workers_are_row_stochastic(seed in any::<u64>(), smooth in 0.0f64..3.0, noise in 0.0f64..0.2) {
        let b = bank();
        let params = SamplingParams { smooth_ratio: smooth, noise_level: noise };
        let cm = sample_confusion_matrix(&b, params, &(0..10).collect::<Vec<_>>(), &default_groups(10), &mut rng::stream(seed, "t")).unwrap();
        prop_assert!(cm.max_row_sum_error() < 1e-6);
        prop_assert!(cm.rows().iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn greedy_respects_the_cap(
        n_items in 1usize..40,
        diags in proptest::collection::vec(0.3f64..0.95, 1..6),
        cap in 1usize..8,
    ) {
        let k = 3;
        let skills = skills_with_diagonals(&diags, k);
        let m = skills.len();
        let obs = Observations::new(n_items, m, k);
        let labels = vec![LabelState::from_posterior(vec![1.0 / 3.0; 3], 0); n_items];
        let hits: Vec<usize> = (0..n_items).collect();
        match assign_greedy(&hits, &labels, &skills, &obs, &ItemPools::new(), cap) {
            Ok(pairs) => {
                let mut load = vec![0usize; m];
                for (_, j) in pairs {
                    load[j] += 1;
                }
                prop_assert!(load.iter().all(|&l| l <= cap));
            }
            Err(_) => prop_assert!(n_items > cap * m),
        }
    }

    #[test]
    fn greedy_choice_is_scale_invariant(
        diags in proptest::collection::vec(0.2f64..0.6, 1..6),
        scale in 0.1f64..1.6,
        post in proptest::collection::vec(0.01f64..1.0, 3),
    ) {
        let k = 3;
        let s: f64 = post.iter().sum();
        let labels = vec![LabelState::from_posterior(post.iter().map(|p| p / s).collect(), 0)];
        let obs = Observations::new(1, diags.len(), k);
        let a = assign_greedy(&[0], &labels, &skills_with_diagonals(&diags, k), &obs, &ItemPools::new(), 10).unwrap();
        let mut scaled = skills_with_diagonals(&diags, k);
        for sk in &mut scaled {
            for y in 0..k {
                let v = sk.confusion.get(y, y) * scale;
                sk.confusion.set(y, y, v);
            }
        }
        let b = assign_greedy(&[0], &labels, &scaled, &obs, &ItemPools::new(), 10).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn identical_skills_fill_the_lowest_worker_first() {
    let skills = skills_with_diagonals(&[0.7; 4], 3);
    let obs = Observations::new(10, 4, 3);
    let labels = vec![LabelState::from_posterior(vec![0.5, 0.3, 0.2], 0); 10];
    let hits: Vec<usize> = (0..10).collect();
    let pairs = assign_greedy(&hits, &labels, &skills, &obs, &ItemPools::new(), 3).unwrap();
    let workers: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    assert_eq!(workers, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
}

#[test]
fn simulated_workers_are_reproducible() {
    let a: Vec<SimWorker> = sample_pool(
        &bank(),
        SamplingParams::default(),
        &(0..10).collect::<Vec<_>>(),
        &default_groups(10),
        5,
        4,
    )
    .unwrap();
    let b: Vec<SimWorker> = sample_pool(
        &bank(),
        SamplingParams::default(),
        &(0..10).collect::<Vec<_>>(),
        &default_groups(10),
        5,
        4,
    )
    .unwrap();
    assert_eq!(a, b);
}
