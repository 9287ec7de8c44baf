mod common;

use anchorinv_core::data::Dataset;
use anchorinv_core::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided p by enumerating every sign assignment of the ranks.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            le += 1;
        }
        if s >= w - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let n = rng.random_range(1..=12);
        // coarse grid so ties and zero differences occur
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        let o = enumerated_p(&a, &b);
        assert!((p - o).abs() < 1e-12, "case {case}: {p} vs {o}");
    }
}

#[test]
fn wilcoxon_edge_cases() {
    let x = [3.0, 1.0, 4.0, 1.0, 5.0];
    assert_eq!(wilcoxon_signed_rank(&x, &x).unwrap(), 1.0);
    // all five positive: p = 2 / 32
    let y = [2.0, 0.0, 3.0, 0.0, 4.0];
    assert!((wilcoxon_signed_rank(&x, &y).unwrap() - 0.0625).abs() < 1e-15);
    assert!(wilcoxon_signed_rank(&x, &y[..4]).is_err());
}

#[test]
fn wilcoxon_normal_approximation_above_exact_range() {
    // n = 30 distinct differences 1..30, all positive: W+ = 465
    let a: Vec<f64> = (1..=30).map(|v| v as f64).collect();
    let b = vec![0.0; 30];
    let n = 30.0f64;
    let z = (465.0 - n * (n + 1.0) / 4.0) / (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0).sqrt();
    let p = wilcoxon_signed_rank(&a, &b).unwrap();
    // erfc-based two-sided tail, z ≈ 4.78
    assert!((z - 4.7821).abs() < 1e-3);
    assert!(p > 1e-7 && p < 2e-6, "p = {p}");
}

/// Independent confusion-matrix macro-F1.
fn oracle_macro_f1(pred: &[usize], labels: &[usize], subset: &[usize], classes: usize) -> f64 {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        m[y][p] += 1;
    }
    let f: Vec<f64> = subset
        .iter()
        .map(|&k| {
            let tp = m[k][k] as f64;
            let fp = (0..classes).filter(|&y| y != k).map(|y| m[y][k]).sum::<usize>() as f64;
            let fne = (0..classes).filter(|&p| p != k).map(|p| m[k][p]).sum::<usize>() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
            if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            }
        })
        .collect();
    100.0 * f.iter().sum::<f64>() / f.len() as f64
}

#[test]
fn random_predictor_reaches_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, expected) in [(10, 10.00), (14, 7.14), (16, 6.25)] {
        let labels: Vec<usize> = (0..10_000).map(|i| i % c).collect();
        let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..c)).collect();
        let subset: Vec<usize> = (0..c).collect();
        let f = macro_f1(&pred, &labels, &subset).unwrap();
        assert!((f - expected).abs() <= 0.5, "C = {c}: {f}");
        assert!((random_chance_f1(c).unwrap() - expected).abs() < 0.005);
    }
}

#[test]
fn evaluate_session_splits_subsets() {
    let d = common::desk();
    let s = evaluate_session(&d.state, &d.test, &[0, 1], &[0, 1]).unwrap();
    assert!(s.incremental.is_none());
    assert!(s.all > 90.0);
    assert_eq!(s.all, s.base);
    let three = evaluate_session(&d.state, &d.test, &[0, 1, 2], &[0, 1]).unwrap();
    // class 2 has no classifier entry, so it is never predicted
    assert_eq!(three.incremental, Some(0.0));
    assert!(evaluate_session(&d.state, &Dataset::default(), &[0], &[0]).is_err());
}

#[test]
fn trial_sets_pair_across_calls_and_differ_across_trials() {
    let d = common::desk();
    let a = sample_trial_sets(&d.split, trial_seed(5, 0)).unwrap();
    assert_eq!(a, sample_trial_sets(&d.split, trial_seed(5, 0)).unwrap());
    assert_ne!(a, sample_trial_sets(&d.split, trial_seed(5, 1)).unwrap());
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|s| s.len() == 10));
}

#[test]
fn summary_statistics() {
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!((m, s), (5.0, 2.0));
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
    let st = Stat::of(&[1.0, 3.0]);
    assert_eq!((st.mean, st.std, st.median), (2.0, 1.0, 2.0));
}

proptest! {
    #[test]
    fn macro_f1_matches_confusion_matrix(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200),
        cut in 1usize..6,
    ) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let subset: Vec<usize> = (0..cut).collect();
        let f = macro_f1(&pred, &labels, &subset).unwrap();
        prop_assert!((f - oracle_macro_f1(&pred, &labels, &subset, 6)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&f));
    }

    #[test]
    fn wilcoxon_p_in_unit_interval_and_symmetric(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        seed in 0u64..100,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        let q = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p - q).abs() < 1e-12);
    }
}
