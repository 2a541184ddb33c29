mod common;

use proptest::prelude::*;

use crowdloop_core::dataset::{gen_synthetic, FeatureStore, SyntheticSpec};
use crowdloop_core::inference::{argmax, LabelState};
use crowdloop_core::learner::{
    calibrate_temperature, fit, fit_mixmatch, fit_temperature, hyperparam_search, mix_pair,
    mixing_weight, nll_at_temperature, predict_all, select_model, select_pseudo_labels,
    softmax_scaled, HyperGrid, MlpParams, SemiMode, TrainConfig,
};

fn separable() -> (FeatureStore, Vec<(usize, usize)>) {
    let spec = SyntheticSpec {
        k: 2,
        n_per_class: 5,
        dim: 2,
        separation: 10.0,
        prototypes_per_class: 2,
        groups: vec![],
        group_separation: 0.0,
    };
    let (m, f) = gen_synthetic(&spec, 7).unwrap();
    let labeled = m
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (i, it.true_label.unwrap()))
        .collect();
    (f, labeled)
}

/// Perceptron; terminates only if the data are linearly separable.
fn perceptron_separates(f: &FeatureStore, labeled: &[(usize, usize)]) -> bool {
    let mut w = [0.0f64; 3];
    for _ in 0..10_000 {
        let mut mistakes = 0;
        for &(i, y) in labeled {
            let x = f.row(i);
            let s = w[0] * f64::from(x[0]) + w[1] * f64::from(x[1]) + w[2];
            let t = if y == 1 { 1.0 } else { -1.0 };
            if s * t <= 0.0 {
                w[0] += t * f64::from(x[0]);
                w[1] += t * f64::from(x[1]);
                w[2] += t;
                mistakes += 1;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        hidden_dim: 16,
        epochs: 200,
        batch_size: 4,
        lr_ratio: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_separates_a_separable_set() {
    let (f, labeled) = separable();
    assert!(perceptron_separates(&f, &labeled));
    let p = fit(&f, 2, &labeled, &small_cfg()).unwrap();
    let items: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let probs = predict_all(&p, &f, &items);
    for ((_, y), pr) in labeled.iter().zip(&probs) {
        assert_eq!(argmax(pr), *y);
    }
}

#[test]
fn fit_is_a_pure_function_of_its_inputs() {
    let (f, labeled) = separable();
    let a = fit(&f, 2, &labeled, &small_cfg()).unwrap();
    let b = fit(&f, 2, &labeled, &small_cfg()).unwrap();
    assert_eq!(a.theta(), b.theta());
    let other = fit(
        &f,
        2,
        &labeled,
        &TrainConfig {
            seed: 1,
            ..small_cfg()
        },
    )
    .unwrap();
    assert_ne!(a.theta(), other.theta());
}

#[test]
fn mixmatch_with_zero_weight_matches_fit() {
    let (f, labeled) = separable();
    let cfg = TrainConfig {
        mu: 0.0,
        semi_mode: SemiMode::Mixmatch,
        ..small_cfg()
    };
    let unlabeled: Vec<(usize, Vec<f64>)> = vec![(0, vec![0.9, 0.1]), (9, vec![0.2, 0.8])];
    let a = fit_mixmatch(&f, 2, &labeled[..4], &unlabeled, &cfg).unwrap();
    let b = fit(&f, 2, &labeled[..4], &cfg).unwrap();
    for (x, y) in a.theta().iter().zip(b.theta()) {
        assert!((x - y).abs() <= 1e-9);
    }
    let c = fit_mixmatch(&f, 2, &labeled[..4], &[], &TrainConfig { mu: 3.0, ..cfg }).unwrap();
    assert_eq!(c.theta(), b.theta());
}

#[test]
fn mixmatch_uses_the_unlabeled_term() {
    let (f, labeled) = separable();
    let cfg = TrainConfig {
        semi_mode: SemiMode::Mixmatch,
        gamma: 2,
        ..small_cfg()
    };
    let unlabeled: Vec<(usize, Vec<f64>)> = labeled[4..]
        .iter()
        .map(|&(i, y)| {
            (
                i,
                if y == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                },
            )
        })
        .collect();
    let a = fit_mixmatch(&f, 2, &labeled[..4], &unlabeled, &cfg).unwrap();
    let b = fit(&f, 2, &labeled[..4], &cfg).unwrap();
    assert_ne!(a.theta(), b.theta());
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..25 {
        let err = common::gradient_check(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn calibrated_logits_keep_unit_temperature() {
    // Logits whose softmax is (0.7, 0.2, 0.1) on a set labelled in exactly
    // those proportions: the NLL minimum is at T = 1.
    let logits = vec![vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]; 100];
    let labels: Vec<usize> = (0..100)
        .map(|i| {
            if i < 70 {
                0
            } else if i < 90 {
                1
            } else {
                2
            }
        })
        .collect();
    let t = fit_temperature(&logits, &labels).unwrap();
    assert!((t.ln()).abs() < 2e-3, "T = {t}");
}

#[test]
fn overconfident_logits_get_their_scale_back() {
    let base = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
    let logits = vec![base.iter().map(|v| v * 10.0).collect::<Vec<_>>(); 100];
    let labels: Vec<usize> = (0..100)
        .map(|i| {
            if i < 70 {
                0
            } else if i < 90 {
                1
            } else {
                2
            }
        })
        .collect();
    let t = fit_temperature(&logits, &labels).unwrap();
    assert!((t.ln() - 10f64.ln()).abs() < 2e-3, "T = {t}");
    assert!(nll_at_temperature(&logits, &labels, t) <= nll_at_temperature(&logits, &labels, 1.0));
}

#[test]
fn calibration_and_selection_on_a_trained_net() {
    let (f, labeled) = separable();
    let p = fit(&f, 2, &labeled[..6], &small_cfg()).unwrap();
    let items: Vec<usize> = (0..f.n_items()).collect();
    let before: Vec<usize> = predict_all(&p, &f, &items)
        .iter()
        .map(|v| argmax(v))
        .collect();
    let c = calibrate_temperature(p.clone(), &f, &labeled[6..]).unwrap();
    let after: Vec<usize> = predict_all(&c, &f, &items)
        .iter()
        .map(|v| argmax(v))
        .collect();
    assert_eq!(before, after);

    let (first, replaced) = select_model(c.clone(), None, &f, &labeled[6..]).unwrap();
    assert!(replaced);
    let worse = MlpParams::zeros(2, 16, 2);
    let (kept, replaced) = select_model(worse, Some(first.clone()), &f, &labeled[6..]).unwrap();
    assert!(!replaced);
    assert_eq!(kept.params.theta(), c.theta());
}

#[test]
fn pseudo_label_examples() {
    let l = vec![
        LabelState::from_posterior(vec![0.95, 0.05], 0),
        LabelState::from_posterior(vec![0.85, 0.15], 0),
    ];
    assert_eq!(select_pseudo_labels(&l, 0.1), vec![(0, 0)]);
    assert_eq!(select_pseudo_labels(&l, 0.999).len(), 2);
}

#[test]
fn single_point_search_returns_the_point() {
    let (f, labeled) = separable();
    let grid = HyperGrid {
        lr_ratio: vec![0.005],
        weight_decay: vec![0.001],
        mu: vec![3.0],
        gamma: vec![50],
    };
    let base = small_cfg();
    let lattice = grid.lattice(&base);
    assert_eq!(lattice.len(), 1);
    let got = hyperparam_search(&lattice, &f, 2, &labeled[..6], &labeled[6..]).unwrap();
    assert_eq!(got, lattice[0]);
}

proptest! {
    #[test]
    fn temperature_never_moves_the_argmax(
        logits in proptest::collection::vec(-20.0f64..20.0, 2..10),
        log_t in -3.0f64..3.0,
    ) {
        let before = argmax(&logits);
        let after = argmax(&softmax_scaled(&logits, log_t.exp()));
        prop_assert_eq!(before, after);
    }

    #[test]
    fn pseudo_labels_shrink_as_tau_shrinks(
        probs in proptest::collection::vec(0.0f64..1.0, 1..30),
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        let labels: Vec<LabelState> = probs.iter().map(|&p| LabelState::from_posterior(vec![p, 1.0 - p], 0)).collect();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let small = select_pseudo_labels(&labels, lo);
        let large = select_pseudo_labels(&labels, hi);
        prop_assert!(small.len() <= large.len());
        prop_assert!(small.iter().all(|s| large.contains(s)));
    }

    #[test]
    fn mixing_weight_stays_in_upper_half(lambda in 0.0f64..=1.0) {
        let w = mixing_weight(lambda);
        prop_assert!((0.5..=1.0).contains(&w));
    }

    #[test]
    fn mixing_identical_pairs_is_a_no_op(
        x in proptest::collection::vec(-5.0f64..5.0, 1..6),
        lambda in 0.5f64..=1.0,
    ) {
        let p = vec![0.25, 0.75];
        let (mx, mp) = mix_pair(&x, &p, &x, &p, lambda);
        for (a, b) in mx.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in mp.iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let (ox, op) = mix_pair(&x, &p, &[0.0; 6][..x.len()], &[1.0, 0.0], 1.0);
        prop_assert_eq!(ox, x);
        prop_assert_eq!(op, p);
    }
}
