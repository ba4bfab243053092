mod common;

use common::*;
use npcox::estep::{erisk_at_new_beta, subject_expectations, subject_expectations_with, EStep, EStepConfig};
use npcox::gaussian::Completion;
use npcox::{Dataset, ObservedSubject};

fn library(case: &Case, order: usize) -> Blocks {
    let e = subject_expectations(&case.subject, &case.params, order).unwrap();
    let new = erisk_at_new_beta(&case.subject, &case.params, &case.beta_new, order).unwrap();
    Blocks::from_expectations(&e, new)
}

#[test]
fn gauss_hermite_integrates_polynomials() {
    let (x, w) = gauss_hermite(40);
    let m0: f64 = w.iter().sum();
    let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
    let sp = std::f64::consts::PI.sqrt();
    assert!((m0 - sp).abs() < 1e-13);
    assert!((m2 - sp / 2.0).abs() < 1e-13);
    assert!((m4 - 0.75 * sp).abs() < 1e-12);
}

#[test]
fn matches_tensor_quadrature() {
    let mut r = rng(11);
    for _ in 0..25 {
        let case = random_case(&mut r, 4, 2);
        let err = block_rel_err(&library(&case, 30), &tensor_oracle(&case, 80));
        for (k, e) in err.iter().enumerate() {
            assert!(*e < 1e-6, "{}: {e:e}", BLOCK_NAMES[k]);
        }
    }
}

#[test]
fn one_missing_and_three_missing() {
    let mut r = rng(12);
    for m in [1, 3] {
        for _ in 0..5 {
            let case = random_case(&mut r, 4, m);
            let order = if m == 3 { 30 } else { 80 };
            let err = block_rel_err(&library(&case, 30), &tensor_oracle(&case, order));
            assert!(err.iter().all(|&e| e < 1e-6), "{m} missing: {err:?}");
        }
    }
}

#[test]
fn matches_monte_carlo() {
    let mut r = rng(13);
    let mut worst = 0.0_f64;
    for _ in 0..5 {
        let case = random_case(&mut r, 4, 2);
        let lib = library(&case, 30);
        let (mc, se) = monte_carlo(&case, 200_000, &mut r);
        for ((a, b), s) in lib.blocks().iter().zip(mc.blocks()).zip(se.blocks()) {
            for ((x, y), s) in a.iter().zip(b).zip(s) {
                let z = if *s > 0.0 { (x - y).abs() / s } else { (x - y).abs() / 1e-12 };
                worst = worst.max(z);
            }
        }
    }
    assert!(worst < 5.0, "largest MC z-score {worst}");
}

#[test]
fn completion_does_not_change_expectations() {
    let mut r = rng(14);
    for _ in 0..30 {
        let m = r.random_range(2..=4);
        let case = random_case(&mut r, 5, m);
        let hh = EStepConfig { completion: Completion::Householder, ..EStepConfig::default() };
        let gs = EStepConfig { completion: Completion::GramSchmidt, ..EStepConfig::default() };
        let a = subject_expectations_with(&case.subject, &case.params, &hh).unwrap();
        let b = subject_expectations_with(&case.subject, &case.params, &gs).unwrap();
        let a = Blocks::from_expectations(&a, 0.0);
        let b = Blocks::from_expectations(&b, 0.0);
        for (x, y) in a.blocks().iter().zip(b.blocks()) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() <= 1e-8 * v.abs().max(1.0), "{u} vs {v}");
            }
        }
    }
}

#[test]
fn zero_missing_coefficients_use_the_gaussian_law() {
    let mut r = rng(15);
    let mut case = random_case(&mut r, 4, 2);
    for &j in case.subject.mask.missing() {
        case.params.beta[j] = 0.0;
    }
    let lib = library(&case, 30);
    let oracle = tensor_oracle(&case, 40);
    assert!(block_rel_err(&lib, &oracle).iter().all(|&e| e < 1e-10));
}

#[test]
fn compact_engine_agrees_with_direct_evaluation() {
    let mut r = rng(16);
    let cases: Vec<Case> = (0..12).map(|k| random_case(&mut r, 3, k % 3)).collect();
    let params = cases[0].params.clone();
    let subjects: Vec<ObservedSubject<f64>> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| ObservedSubject { y: 0.5 + 0.1 * i as f64, ..c.subject.clone() })
        .collect();
    let mut params = params;
    params.baseline = npcox::Baseline::new(vec![0.5, 1.0, 1.5], vec![0.2, 0.3, 0.4]).unwrap();
    let data = Dataset::new(subjects.clone(), 3, 0).unwrap();
    let es = EStep::run(&data, &params, &EStepConfig::default()).unwrap();
    for (i, s) in subjects.iter().enumerate() {
        let direct = subject_expectations(s, &params, 30).unwrap();
        let compact = es.expectations(i);
        assert!((compact.erisk - direct.erisk).abs() < 1e-12 * direct.erisk);
        for (a, b) in compact.ex.iter().zip(&direct.ex) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        assert!(compact.exx.max_abs_diff(&direct.exx) < 1e-11 * direct.exx.max_abs().max(1.0));
        assert!(compact.erisk_xx.max_abs_diff(&direct.erisk_xx) < 1e-11 * direct.erisk_xx.max_abs().max(1.0));
        let beta: Vec<f64> = params.beta.iter().map(|b| b * 0.7 + 0.1).collect();
        let at = es.log_erisk_at(&beta)[i].exp();
        let direct_new = erisk_at_new_beta(s, &params, &beta, 30).unwrap();
        assert!((at - direct_new).abs() < 1e-11 * direct_new);
    }
}

use rand::Rng;
