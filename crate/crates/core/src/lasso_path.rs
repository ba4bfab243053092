//! LASSO-penalized NPMLE: quadratic surrogate of `Q`, coordinate descent,
//! a γ path with warm starts, and BIC selection over unpenalized refits.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Baseline, Dataset, ParameterSet};
use crate::em_fit::{
    event_sum, fit_npmle, initial_params, profile_q, run_em, score_hessian, BetaUpdate, FitConfig, FitResult,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::real::Real;

pub fn soft_threshold<T: Real>(x: T, gamma: T) -> T {
    if x > gamma {
        x - gamma
    } else if x < -gamma {
        x + gamma
    } else {
        T::zero()
    }
}

/// `−½ βᵀAβ − Pᵀβ`, the second-order expansion of `n⁻¹Q` around `β_k` (up to a constant).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadSurrogate<T> {
    pub a: Matrix<T>,
    pub p: Vec<T>,
}

impl<T: Real> QuadSurrogate<T> {
    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn value(&self, beta: &[T]) -> T {
        -T::lit(0.5) * self.a.quad_form(beta) - crate::linalg::dot(&self.p, beta)
    }

    /// `Aβ + P`; the surrogate gradient is its negative.
    pub fn residual(&self, beta: &[T]) -> Vec<T> {
        self.a.matvec(beta).into_iter().zip(&self.p).map(|(x, &p)| x + p).collect()
    }

    /// Largest violation of the optimality conditions of
    /// `max −½βᵀAβ − Pᵀβ − γ‖β‖₁`.
    pub fn kkt_violation(&self, beta: &[T], gamma: T) -> T {
        self.residual(beta)
            .into_iter()
            .zip(beta)
            .map(
                |(r, &b)| {
                    if b == T::zero() {
                        (r.abs() - gamma).max(T::zero())
                    } else {
                        (r + gamma * b.signum()).abs()
                    }
                },
            )
            .fold(T::zero(), T::max)
    }
}

pub fn build_surrogate<T: Real>(grad: &[T], hess: &Matrix<T>, beta_k: &[T], n: usize) -> QuadSurrogate<T> {
    let nf = T::from_usize_lossy(n);
    let hb = hess.matvec(beta_k);
    QuadSurrogate { a: hess.scaled(-T::one() / nf), p: hb.iter().zip(grad).map(|(&h, &g)| (h - g) / nf).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_sweeps: 10_000 }
    }
}

/// Cyclic coordinate descent in ascending index order.
pub fn coordinate_descent<T: Real>(
    surrogate: &QuadSurrogate<T>,
    gamma: T,
    beta_init: &[T],
    config: &CdConfig,
) -> Result<Vec<T>> {
    let dim = surrogate.dim();
    if beta_init.len() != dim {
        return Err(Error::InvalidInput("initial β has the wrong length".into()));
    }
    let a = &surrogate.a;
    let mut beta = beta_init.to_vec();
    for j in 0..dim {
        if !(a[(j, j)] > T::zero()) {
            if beta[j] != T::zero() {
                log::warn!("coordinate {j} has non-positive curvature; frozen at zero");
            }
            beta[j] = T::zero();
        }
    }
    let mut r = surrogate.residual(&beta);
    let tol = T::lit(config.tol);
    let mut last_change = T::infinity();
    for _ in 0..config.max_sweeps {
        let mut change = T::zero();
        for j in 0..dim {
            let ajj = a[(j, j)];
            if !(ajj > T::zero()) {
                continue;
            }
            let old = beta[j];
            let partial = r[j] - ajj * old;
            let new = -soft_threshold(partial, gamma) / ajj;
            if new != old {
                let delta = new - old;
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri = *ri + a[(i, j)] * delta;
                }
                beta[j] = new;
                change = change.max(delta.abs());
            }
        }
        last_change = change;
        if change < tol {
            return Ok(beta);
        }
    }
    Err(Error::CoordinateDescent {
        sweeps: config.max_sweeps,
        last_change: last_change.to_f64_lossy(),
        last_iterate: beta.iter().map(|b| b.to_f64_lossy()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub n_gammas: usize,
    pub gamma_min_ratio: f64,
    pub cd_tol: f64,
    pub cd_max_sweeps: usize,
    pub standardize: bool,
    /// Start each γ from the previous solution.
    pub warm_start: bool,
    /// Explicit decreasing grid; overrides `n_gammas`/`gamma_min_ratio`.
    pub gamma_grid: Option<Vec<f64>>,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            n_gammas: 50,
            gamma_min_ratio: 0.01,
            cd_tol: 1e-8,
            cd_max_sweeps: 10_000,
            standardize: true,
            warm_start: true,
            gamma_grid: None,
        }
    }
}

impl LassoConfig {
    pub fn cd(&self) -> CdConfig {
        CdConfig { tol: self.cd_tol, max_sweeps: self.cd_max_sweeps }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.gamma_grid {
            if g.is_empty() || g.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config("gamma grid must be nonempty and positive".into()));
            }
        } else if self.n_gammas == 0 || !(self.gamma_min_ratio > 0.0 && self.gamma_min_ratio <= 1.0) {
            return Err(Error::Config("lasso.n_gammas ≥ 1 and 0 < lasso.gamma_min_ratio ≤ 1 are required".into()));
        }
        Ok(())
    }
}

/// `γ_max·r^k`, `k = 0…K−1`, with `r^{K−1}` equal to the minimum ratio.
pub fn gamma_grid(gamma_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![gamma_max];
    }
    let step = min_ratio.ln() / (n - 1) as f64;
    (0..n).map(|k| gamma_max * (step * k as f64).exp()).collect()
}

/// Centering and scaling used for the penalized fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization<T> {
    pub center: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Real> Standardization<T> {
    pub fn identity(dim: usize) -> Self {
        Self { center: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    /// Unit available-case variance, zero available-case mean.
    pub fn from_data(data: &Dataset<T>) -> Self {
        let (center, scale) = data.available_case_moments();
        Self { center, scale }
    }

    pub fn apply(&self, data: &Dataset<T>) -> Dataset<T> {
        data.affine_transform(&self.center, &self.scale)
    }

    /// Maps standardized-scale parameters to the original scale.
    pub fn to_original(&self, std: &ParameterSet<T>, p: usize) -> Result<ParameterSet<T>> {
        let beta: Vec<T> = std.beta.iter().zip(&self.scale).map(|(&b, &s)| b / s).collect();
        let shift: T = beta.iter().zip(&self.center).map(|(&b, &c)| b * c).sum();
        let factor = (-shift).exp();
        let jumps = std.baseline.jumps().iter().map(|&j| j * factor).collect();
        let baseline = Baseline::new(std.baseline.times().to_vec(), jumps)?;
        let mu = (0..p).map(|j| self.center[j] + self.scale[j] * std.mu[j]).collect();
        let sigma = Matrix::from_fn(p, p, |a, b| self.scale[a] * self.scale[b] * std.sigma[(a, b)]);
        Ok(ParameterSet { beta, baseline, mu, sigma })
    }

    /// Inverse of [`Self::to_original`].
    pub fn to_standardized(&self, orig: &ParameterSet<T>, p: usize) -> Result<ParameterSet<T>> {
        let shift: T = orig.beta.iter().zip(&self.center).map(|(&b, &c)| b * c).sum();
        let factor = shift.exp();
        let jumps = orig.baseline.jumps().iter().map(|&j| j * factor).collect();
        let baseline = Baseline::new(orig.baseline.times().to_vec(), jumps)?;
        let beta = orig.beta.iter().zip(&self.scale).map(|(&b, &s)| b * s).collect();
        let mu = (0..p).map(|j| (orig.mu[j] - self.center[j]) / self.scale[j]).collect();
        let sigma = Matrix::from_fn(p, p, |a, b| orig.sigma[(a, b)] / (self.scale[a] * self.scale[b]));
        Ok(ParameterSet { beta, baseline, mu, sigma })
    }
}

/// Penalized EM on already-standardized data.
fn penalized_em<T: Real>(
    data: &Dataset<T>,
    gamma: T,
    fit: &FitConfig,
    cd: &CdConfig,
    init: ParameterSet<T>,
) -> Result<FitResult<T>> {
    let n = data.n();
    let nf = T::from_usize_lossy(n);
    let dim = data.dim();
    let free: Vec<usize> = (0..dim).collect();
    let l1 = |b: &[T]| b.iter().map(|x| x.abs()).sum::<T>();
    let halving = fit.step_halving_max;
    run_em(
        data,
        fit,
        init,
        &free,
        |b| nf * gamma * l1(b),
        |es, rs, beta_k| {
            let (grad, hess) = score_hessian(es, rs)?;
            let surrogate = build_surrogate(&grad, &hess, beta_k, n);
            let target = coordinate_descent(&surrogate, gamma, beta_k, cd)?;
            debug_assert!(surrogate.kkt_violation(&target, gamma) <= T::lit(1e-6));
            let esum = event_sum(es, rs);
            let objective = |b: &[T]| profile_q(es, rs, &esum, b) / nf - gamma * l1(b);
            let f0 = objective(beta_k);
            let roundoff = T::lit(64.0) * T::epsilon() * (T::one() + f0.abs());
            let mut step = T::one();
            for _ in 0..=halving {
                let beta: Vec<T> = beta_k.iter().zip(&target).map(|(&b, &t)| b + step * (t - b)).collect();
                let f = objective(&beta);
                if f.is_finite() && f >= f0 - roundoff {
                    let log_erisk = es.log_erisk_at(&beta);
                    return Ok(BetaUpdate { beta, log_erisk, stalled: false });
                }
                step = step * T::lit(0.5);
            }
            Ok(BetaUpdate { beta: beta_k.to_vec(), log_erisk: es.log_erisk_at(beta_k), stalled: true })
        },
    )
}

/// A penalized fit on the original scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PenalizedFit<T> {
    pub gamma: T,
    pub params: ParameterSet<T>,
    pub active: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized observed log-likelihood trace (standardized scale).
    pub objective_trace: Vec<T>,
}

fn active_set<T: Real>(beta: &[T]) -> Vec<usize> {
    beta.iter().enumerate().filter(|(_, &b)| b != T::zero()).map(|(j, _)| j).collect()
}

/// Penalized NPMLE at one γ. `warm_start` is on the original scale.
pub fn fit_penalized<T: Real>(
    data: &Dataset<T>,
    gamma: T,
    fit: &FitConfig,
    lasso: &LassoConfig,
    warm_start: Option<&ParameterSet<T>>,
) -> Result<PenalizedFit<T>> {
    if !(gamma > T::zero()) {
        return Err(Error::InvalidInput("γ must be positive".into()));
    }
    check_dimensions(data)?;
    let st = standardization(data, lasso);
    let sdata = st.apply(data);
    let init = match warm_start {
        Some(w) => st.to_standardized(&crate::em_fit::adapt_params(data, w)?, data.p())?,
        None => initial_params(&sdata)?,
    };
    let res = penalized_em(&sdata, gamma, fit, &lasso.cd(), init)?;
    let params = st.to_original(&res.params, data.p())?;
    Ok(PenalizedFit {
        gamma,
        active: active_set(&params.beta),
        params,
        iterations: res.iterations,
        converged: res.converged,
        objective_trace: res.loglik_trace,
    })
}

fn standardization<T: Real>(data: &Dataset<T>, lasso: &LassoConfig) -> Standardization<T> {
    if lasso.standardize {
        Standardization::from_data(data)
    } else {
        Standardization::identity(data.dim())
    }
}

fn check_dimensions<T: Real>(data: &Dataset<T>) -> Result<()> {
    if data.dim() >= data.n() {
        return Err(Error::InvalidInput(format!("need p < n, got p = {} and n = {}", data.dim(), data.n())));
    }
    Ok(())
}

/// Smallest γ whose solution at the converged null model is `β = 0`.
pub fn gamma_max<T: Real>(data: &Dataset<T>, fit: &FitConfig, lasso: &LassoConfig) -> Result<T> {
    let sdata = standardization(data, lasso).apply(data);
    let null = fit_npmle(&sdata, fit, Some(&[]))?;
    null_gamma_max(&sdata, fit, &null.params)
}

fn null_gamma_max<T: Real>(sdata: &Dataset<T>, fit: &FitConfig, null: &ParameterSet<T>) -> Result<T> {
    let es = crate::estep::EStep::run(sdata, null, &fit.estep())?;
    let rs = crate::em_fit::RiskSets::new(sdata);
    let (grad, _) = score_hessian(&es, &rs)?;
    Ok(crate::linalg::max_abs(&grad) / T::from_usize_lossy(sdata.n()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PathPoint<T> {
    pub gamma: T,
    /// Penalized estimate on the original scale.
    pub beta: Vec<T>,
    pub active: Vec<usize>,
    /// Observed log-likelihood of the unpenalized refit on the active set.
    pub loglik: Option<T>,
    pub bic: Option<T>,
    pub converged: bool,
    /// Largest drop of the penalized observed log-likelihood between EM iterations.
    pub max_descent: Option<T>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct LassoPath<T> {
    pub gamma_max: T,
    pub points: Vec<PathPoint<T>>,
    pub selected: usize,
    /// Unpenalized refit on the selected active set.
    pub refit: FitResult<T>,
}

impl<T: Real> LassoPath<T> {
    pub fn gammas(&self) -> Vec<T> {
        self.points.iter().map(|p| p.gamma).collect()
    }

    pub fn selected_point(&self) -> &PathPoint<T> {
        &self.points[self.selected]
    }

    pub fn selected_beta(&self) -> &[T] {
        &self.refit.params.beta
    }
}

/// BIC from an observed log-likelihood.
pub fn bic<T: Real>(loglik: T, n: usize, size: usize) -> T {
    -T::lit(2.0) * loglik + T::from_usize_lossy(n).ln() * T::from_usize_lossy(size)
}

/// The γ path: penalized fits, refits on distinct active sets, BIC selection.
pub fn tune_path<T: Real>(data: &Dataset<T>, fit: &FitConfig, lasso: &LassoConfig) -> Result<LassoPath<T>> {
    lasso.validate()?;
    if data.n_events() < 2 {
        return Err(Error::InvalidInput("the penalized path needs at least two events".into()));
    }
    check_dimensions(data)?;
    let st = standardization(data, lasso);
    let sdata = st.apply(data);
    let null = fit_npmle(&sdata, fit, Some(&[]))?;
    let gmax = null_gamma_max(&sdata, fit, &null.params)?;
    let grid: Vec<T> = match &lasso.gamma_grid {
        Some(g) => g.iter().map(|&x| T::lit(x)).collect(),
        None => {
            gamma_grid(gmax.to_f64_lossy(), lasso.n_gammas, lasso.gamma_min_ratio).into_iter().map(T::lit).collect()
        }
    };
    let cd = lasso.cd();
    let solve = |gamma: T, init: ParameterSet<T>| -> (Option<ParameterSet<T>>, PathPoint<T>) {
        match penalized_em(&sdata, gamma, fit, &cd, init).and_then(|r| Ok((st.to_original(&r.params, data.p())?, r))) {
            Ok((orig, r)) => {
                let point = PathPoint {
                    gamma,
                    beta: orig.beta.clone(),
                    active: active_set(&orig.beta),
                    loglik: None,
                    bic: None,
                    converged: r.converged,
                    max_descent: Some(r.max_descent()),
                    error: None,
                };
                (Some(r.params), point)
            }
            Err(e) => (
                None,
                PathPoint {
                    gamma,
                    beta: Vec::new(),
                    active: Vec::new(),
                    loglik: None,
                    bic: None,
                    converged: false,
                    max_descent: None,
                    error: Some(e.to_string()),
                },
            ),
        }
    };
    let mut points: Vec<PathPoint<T>> = if lasso.warm_start {
        let mut current = null.params.clone();
        let mut out = Vec::with_capacity(grid.len());
        for &g in &grid {
            let (next, point) = solve(g, current.clone());
            if let Some(n) = next {
                current = n;
            }
            out.push(point);
        }
        out
    } else {
        grid.par_iter().map(|&g| solve(g, null.params.clone()).1).collect()
    };

    let mut sets: Vec<Vec<usize>> = points.iter().filter(|p| p.error.is_none()).map(|p| p.active.clone()).collect();
    sets.sort();
    sets.dedup();
    let refits: Vec<(Vec<usize>, Result<FitResult<T>>)> = sets
        .into_par_iter()
        .map(|s| {
            let r = fit_npmle(data, fit, Some(&s));
            (s, r)
        })
        .collect();
    let refits: BTreeMap<Vec<usize>, Result<FitResult<T>>> = refits.into_iter().collect();

    let n = data.n();
    let mut selected: Option<(usize, T)> = None;
    for (k, point) in points.iter_mut().enumerate() {
        if point.error.is_some() {
            continue;
        }
        match &refits[&point.active] {
            Ok(r) => {
                let b = bic(r.loglik, n, point.active.len());
                point.loglik = Some(r.loglik);
                point.bic = Some(b);
                if selected.is_none_or(|(_, best)| b < best) {
                    selected = Some((k, b));
                }
            }
            Err(e) => point.error = Some(format!("refit failed: {e}")),
        }
    }
    let Some((selected, _)) = selected else {
        return Err(Error::NonConvergence("every point of the γ path failed".into()));
    };
    let refit = refits[&points[selected].active].clone()?;
    Ok(LassoPath { gamma_max: gmax, points, selected, refit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.5, 0.0), -2.5);
        assert_eq!(soft_threshold(-2.5, 1.0), -1.5);
    }

    #[test]
    fn surrogate_at_zero() {
        let hess = Matrix::from_rows(&[vec![-4.0, 1.0], vec![1.0, -2.0]]);
        let s = build_surrogate(&[2.0, -1.0], &hess, &[0.0, 0.0], 2);
        assert_eq!(s.p, vec![-1.0, 0.5]);
        let s = build_surrogate(&[0.0, 0.0], &hess, &[0.0, 0.0], 2);
        let b = coordinate_descent(&s, 0.1, &[0.0, 0.0], &CdConfig::default()).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn orthogonal_design() {
        let s = QuadSurrogate { a: Matrix::identity(3), p: vec![-2.0, 0.3, 1.5] };
        let b = coordinate_descent(&s, 0.5, &[0.0; 3], &CdConfig::default()).unwrap();
        assert_eq!(b, vec![1.5, 0.0, -1.0]);
        let b = coordinate_descent(&s, 2.0, &[0.0; 3], &CdConfig::default()).unwrap();
        assert_eq!(b, vec![0.0; 3]);
    }

    #[test]
    fn unpenalized_surrogate_reaches_newton_point() {
        let hess = Matrix::from_rows(&[vec![-3.0, 0.4, 0.1], vec![0.4, -2.0, 0.3], vec![0.1, 0.3, -1.5]]);
        let grad = [0.7_f64, -0.2, 0.4];
        let beta_k = [0.1_f64, 0.2, -0.3];
        let s = build_surrogate(&grad, &hess, &beta_k, 10);
        let b = coordinate_descent(&s, 0.0, &beta_k, &CdConfig { tol: 1e-14, max_sweeps: 10_000 }).unwrap();
        let d = crate::em_fit::newton_direction(&grad, &hess).unwrap();
        for j in 0..3 {
            assert!((b[j] - (beta_k[j] + d[j])).abs() < 1e-12);
        }
        // tangency: −(Aβ_k + P) = grad / n
        let r = s.residual(&beta_k);
        for j in 0..3 {
            assert!((-r[j] - grad[j] / 10.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_cap_reports_last_iterate() {
        let s = QuadSurrogate { a: Matrix::from_rows(&[vec![1.0, 0.99], vec![0.99, 1.0]]), p: vec![-1.0, 1.0] };
        let err = coordinate_descent(&s, 0.0, &[0.0, 0.0], &CdConfig { tol: 1e-300, max_sweeps: 3 }).unwrap_err();
        assert!(matches!(err, Error::CoordinateDescent { sweeps: 3, ref last_iterate, .. } if last_iterate.len() == 2));
    }

    #[test]
    fn grid_endpoints() {
        let g = gamma_grid(2.0, 50, 0.01);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 2.0);
        assert!((g[49] - 0.02).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
