use npcox::em_fit::{fit_npmle, FitConfig};
use npcox::lasso_path::{bic, tune_path, LassoConfig};
use npcox::sim_bench::{gen_dataset, selection_metrics, table1, SimDesign};
use npcox::Dataset;

fn sparse_design(n: usize) -> SimDesign {
    let mut d = table1(n, 0.2);
    d.p = 10;
    d.mu = vec![0.0; 10];
    d.beta = vec![0.6, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0];
    d.missing_coords = vec![0, 1, 2];
    d
}

fn data(seed: u64) -> Dataset<f64> {
    gen_dataset(&sparse_design(400), seed).unwrap().data
}

fn lasso(n_gammas: usize) -> LassoConfig {
    LassoConfig { n_gammas, ..LassoConfig::default() }
}

#[test]
fn path_starts_empty_and_recovers_the_support() {
    let d = data(1);
    let path = tune_path(&d, &FitConfig::default(), &lasso(20)).unwrap();
    assert!(path.points[0].active.is_empty());
    assert!(path.points.iter().all(|p| p.error.is_none()));
    let (tpr, _, _) = selection_metrics(path.selected_beta(), &sparse_design(400).beta).unwrap();
    assert_eq!(tpr, 1.0);
    let gammas = path.gammas();
    assert!(gammas.windows(2).all(|w| w[1] < w[0]));
    for p in &path.points {
        assert!(p.max_descent.unwrap() <= 1e-10);
    }
}

#[test]
fn bic_matches_a_cold_refit() {
    let d = data(2);
    let cfg = FitConfig::default();
    let path = tune_path(&d, &cfg, &lasso(15)).unwrap();
    for p in path.points.iter().step_by(4) {
        let cold = fit_npmle(&d, &cfg, Some(&p.active)).unwrap();
        let b = bic(cold.loglik, d.n(), p.active.len());
        assert!((b - p.bic.unwrap()).abs() < 1e-6, "{b} vs {:?}", p.bic);
    }
    let sel = path.selected_point();
    let best = path.points.iter().filter_map(|p| p.bic).fold(f64::INFINITY, f64::min);
    assert_eq!(sel.bic, Some(best));
    for (j, b) in path.selected_beta().iter().enumerate() {
        assert_eq!(*b != 0.0, sel.active.contains(&j));
    }
}

#[test]
fn warm_and_cold_paths_select_the_same_set() {
    let d = data(3);
    let cfg = FitConfig::default();
    let warm = tune_path(&d, &cfg, &lasso(12)).unwrap();
    let cold = tune_path(&d, &cfg, &LassoConfig { warm_start: false, ..lasso(12) }).unwrap();
    assert_eq!(warm.selected_point().active, cold.selected_point().active);
    for (a, b) in warm.points.iter().zip(&cold.points) {
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-3, "γ = {}: {x} vs {y}", a.gamma);
        }
    }
}

#[test]
fn explicit_grid_and_huge_gamma() {
    let d = data(4);
    let cfg = LassoConfig { gamma_grid: Some(vec![1e6]), ..LassoConfig::default() };
    let path = tune_path(&d, &FitConfig::default(), &cfg).unwrap();
    assert_eq!(path.points.len(), 1);
    assert!(path.selected_point().active.is_empty());
    let null = fit_npmle(&d, &FitConfig::default(), Some(&[])).unwrap();
    assert!((path.selected_point().bic.unwrap() - bic(null.loglik, d.n(), 0)).abs() < 1e-9);
}

#[test]
fn standardization_off_still_selects() {
    let d = data(5);
    let cfg = LassoConfig { standardize: false, ..lasso(12) };
    let path = tune_path(&d, &FitConfig::default(), &cfg).unwrap();
    assert!(!path.selected_point().active.is_empty());
}

#[test]
fn rejects_p_not_below_n() {
    let mut d = sparse_design(10);
    d.missing_fraction = 0.0;
    let sim = gen_dataset(&d, 6).unwrap();
    assert!(tune_path(&sim.data, &FitConfig::default(), &lasso(5)).is_err());
}
