//! Comparator estimators: a complete-data Cox solver, complete-case analysis,
//! and conditional-mean single imputation.
//!
//! The Cox solver keeps its own risk-set accumulation so that it can serve as
//! an independent check on the EM fit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Baseline, Dataset, ObservedSubject};
use crate::error::{Error, Result};
use crate::gaussian::ConditionalLaw;
use crate::lasso_path::{
    bic, build_surrogate, coordinate_descent, gamma_grid, LassoConfig, PathPoint, Standardization,
};
use crate::linalg::{max_abs, Matrix};
use crate::real::Real;

/// Fully observed survival data: one covariate row per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct CompleteDataset<T> {
    y: Vec<T>,
    delta: Vec<bool>,
    x: Matrix<T>,
}

impl<T: Real> CompleteDataset<T> {
    pub fn new(y: Vec<T>, delta: Vec<bool>, x: Matrix<T>) -> Result<Self> {
        if y.len() != delta.len() || y.len() != x.rows() {
            return Err(Error::InvalidInput("y, delta and x disagree in length".into()));
        }
        if y.iter().any(|&t| !(t > T::zero()) || !t.is_finite()) {
            return Err(Error::InvalidInput("times must be positive and finite".into()));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("covariates must be finite".into()));
        }
        Ok(Self { y, delta, x })
    }

    /// Gaussian block then fixed block; fails on any missing entry.
    pub fn from_dataset(data: &Dataset<T>) -> Result<Self> {
        if !data.is_complete() {
            return Err(Error::InvalidInput("dataset has missing covariates".into()));
        }
        let dim = data.dim();
        let p = data.p();
        let x = Matrix::from_fn(data.n(), dim, |i, j| data.subject(i).value(j, p).expect("complete"));
        let y = data.subjects().iter().map(|s| s.y).collect();
        let delta = data.subjects().iter().map(|s| s.delta).collect();
        Self::new(y, delta, x)
    }

    /// Back to the general representation, with `p` Gaussian columns.
    pub fn to_dataset(&self, p: usize) -> Result<Dataset<T>> {
        let dim = self.dim();
        let subjects = (0..self.n())
            .map(|i| {
                let row = self.x.row(i);
                ObservedSubject::complete(self.y[i], self.delta[i], row[..p].to_vec()).with_fixed(row[p..].to_vec())
            })
            .collect();
        Dataset::new(subjects, p, dim - p)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn x(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn n_events(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    fn scaled(&self, st: &Standardization<T>) -> Self {
        let x = Matrix::from_fn(self.n(), self.dim(), |i, j| (self.x[(i, j)] - st.center[j]) / st.scale[j]);
        Self { y: self.y.clone(), delta: self.delta.clone(), x }
    }

    fn columns(&self, cols: &[usize]) -> Self {
        let rows: Vec<usize> = (0..self.n()).collect();
        Self { y: self.y.clone(), delta: self.delta.clone(), x: self.x.select(&rows, cols) }
    }

    fn moments(&self) -> Standardization<T> {
        let n = T::from_usize_lossy(self.n());
        let mut st = Standardization::identity(self.dim());
        for j in 0..self.dim() {
            let col = self.x.column(j);
            let m = col.iter().copied().sum::<T>() / n;
            let v = col.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
            st.center[j] = m;
            if v > T::zero() {
                st.scale[j] = v.sqrt();
            }
        }
        st
    }
}

/// Log partial likelihood (Breslow ties) with its gradient and Hessian.
#[derive(Clone, Debug)]
pub struct PartialLikelihood<T> {
    pub loglik: T,
    pub grad: Vec<T>,
    pub hess: Matrix<T>,
    /// Distinct event times, ascending, with Breslow jumps.
    pub times: Vec<T>,
    pub jumps: Vec<T>,
}

pub fn partial_likelihood<T: Real>(data: &CompleteDataset<T>, beta: &[T]) -> PartialLikelihood<T> {
    let n = data.n();
    let dim = data.dim();
    let eta: Vec<T> = (0..n).map(|i| crate::linalg::dot(data.x.row(i), beta)).collect();
    let shift = eta.iter().copied().fold(T::neg_infinity(), T::max).max(T::zero());
    let w: Vec<T> = eta.iter().map(|&e| (e - shift).exp()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.y[b].partial_cmp(&data.y[a]).expect("finite times"));

    let mut s0 = T::zero();
    let mut s1 = vec![T::zero(); dim];
    let mut s2 = Matrix::zeros(dim, dim);
    let mut loglik = T::zero();
    let mut grad = vec![T::zero(); dim];
    let mut hess = Matrix::zeros(dim, dim);
    let mut times = Vec::new();
    let mut jumps = Vec::new();
    let mut k = 0;
    while k < n {
        let t = data.y[order[k]];
        let mut end = k;
        while end < n && data.y[order[end]] == t {
            let i = order[end];
            let xi = data.x.row(i);
            s0 = s0 + w[i];
            for a in 0..dim {
                s1[a] = s1[a] + w[i] * xi[a];
            }
            s2.syr_upper(w[i], xi);
            end += 1;
        }
        let mut d = 0usize;
        for &i in &order[k..end] {
            if data.delta[i] {
                d += 1;
                loglik = loglik + eta[i];
                for (g, &x) in grad.iter_mut().zip(data.x.row(i)) {
                    *g = *g + x;
                }
            }
        }
        if d > 0 {
            let df = T::from_usize_lossy(d);
            loglik = loglik - df * (s0.ln() + shift);
            for a in 0..dim {
                grad[a] = grad[a] - df * s1[a] / s0;
                for b in a..dim {
                    let v = s2[(a, b)] / s0 - s1[a] * s1[b] / (s0 * s0);
                    hess[(a, b)] = hess[(a, b)] - df * v;
                }
            }
            times.push(t);
            jumps.push(df / s0 * (-shift).exp());
        }
        k = end;
    }
    hess.mirror_upper();
    times.reverse();
    jumps.reverse();
    PartialLikelihood { loglik, grad, hess, times, jumps }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxConfig {
    pub max_iter: usize,
    /// Stop once the max-abs coefficient change falls below this.
    pub tol: f64,
    pub step_halving_max: usize,
    /// Coefficients beyond this magnitude are treated as divergence.
    pub divergence_bound: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-12, step_halving_max: 30, divergence_bound: 50.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct CoxFit<T> {
    pub beta: Vec<T>,
    pub baseline: Baseline<T>,
    /// Log partial likelihood at `beta`.
    pub loglik: T,
    pub iterations: usize,
    /// ‖score‖∞ of the (unpenalized) log partial likelihood at `beta`.
    pub score_max: T,
}

fn information_is_definite<T: Real>(hess: &Matrix<T>, n: usize) -> bool {
    let floor = T::lit(1e-10) * T::from_usize_lossy(n);
    match hess.scaled(-T::one()).cholesky() {
        Some(ch) => {
            let f = ch.factor();
            (0..f.rows()).all(|j| f[(j, j)] * f[(j, j)] > floor)
        }
        None => false,
    }
}

fn finish<T: Real>(
    data: &CompleteDataset<T>,
    beta: Vec<T>,
    iterations: usize,
    cfg: &CoxConfig,
    check_information: bool,
) -> Result<CoxFit<T>> {
    if beta.iter().any(|b| !b.is_finite() || b.abs().to_f64_lossy() > cfg.divergence_bound) {
        return Err(Error::NonConvergence("Cox coefficients diverged (possible separation)".into()));
    }
    let pl = partial_likelihood(data, &beta);
    if check_information && !information_is_definite(&pl.hess, data.n()) {
        return Err(Error::NonConvergence(
            "Cox information matrix is singular at the fit (possible separation)".into(),
        ));
    }
    Ok(CoxFit {
        baseline: Baseline::new(pl.times, pl.jumps)?,
        loglik: pl.loglik,
        score_max: max_abs(&pl.grad),
        beta,
        iterations,
    })
}

fn newton_direction<T: Real>(grad: &[T], hess: &Matrix<T>) -> Result<Vec<T>> {
    let neg = hess.scaled(-T::one());
    let mut ridge = T::zero();
    let base = neg.diagonal().into_iter().fold(T::zero(), |m, d| m.max(d.abs())).max(T::one());
    for _ in 0..20 {
        let mut m = neg.clone();
        for j in 0..m.rows() {
            m[(j, j)] = m[(j, j)] + ridge;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.solve(grad));
        }
        ridge = if ridge == T::zero() { T::lit(1e-10) * base } else { ridge * T::lit(10.0) };
    }
    Err(Error::Numeric("Cox information matrix is not positive definite".into()))
}

/// Newton–Raphson on the log partial likelihood, optionally LASSO-penalized
/// by `γ‖β‖₁` on the per-subject scale.
pub fn cox_fit<T: Real>(data: &CompleteDataset<T>, l1_gamma: Option<T>, cfg: &CoxConfig) -> Result<CoxFit<T>> {
    cox_fit_from(data, l1_gamma, cfg, &vec![T::zero(); data.dim()])
}

pub fn cox_fit_from<T: Real>(
    data: &CompleteDataset<T>,
    l1_gamma: Option<T>,
    cfg: &CoxConfig,
    init: &[T],
) -> Result<CoxFit<T>> {
    if data.n_events() == 0 {
        return Err(Error::InvalidInput("Cox fit needs at least one event".into()));
    }
    if init.len() != data.dim() {
        return Err(Error::InvalidInput("initial β has the wrong length".into()));
    }
    if data.dim() == 0 {
        return finish(data, Vec::new(), 0, cfg, false);
    }
    let n = data.n();
    let nf = T::from_usize_lossy(n);
    let gamma = l1_gamma.unwrap_or(T::zero());
    let l1 = |b: &[T]| b.iter().map(|x| x.abs()).sum::<T>();
    let objective = |b: &[T]| partial_likelihood(data, b).loglik / nf - gamma * l1(b);
    let tol = T::lit(cfg.tol);
    let mut beta = init.to_vec();
    for iter in 1..=cfg.max_iter {
        let pl = partial_likelihood(data, &beta);
        let target = if l1_gamma.is_some() {
            let s = build_surrogate(&pl.grad, &pl.hess, &beta, n);
            coordinate_descent(&s, gamma, &beta, &Default::default())?
        } else {
            let d = newton_direction(&pl.grad, &pl.hess)?;
            beta.iter().zip(&d).map(|(&b, &s)| b + s).collect()
        };
        let f0 = pl.loglik / nf - gamma * l1(&beta);
        let slack = T::lit(64.0) * T::epsilon() * (T::one() + f0.abs());
        let mut step = T::one();
        let mut next = None;
        for _ in 0..=cfg.step_halving_max {
            let cand: Vec<T> = beta.iter().zip(&target).map(|(&b, &t)| b + step * (t - b)).collect();
            let f = objective(&cand);
            if f.is_finite() && f >= f0 - slack {
                next = Some(cand);
                break;
            }
            step = step * T::lit(0.5);
        }
        let Some(next) = next else {
            return finish(data, beta, iter, cfg, l1_gamma.is_none());
        };
        let change = crate::linalg::max_abs_diff(&next, &beta);
        beta = next;
        if beta.iter().any(|b| b.abs().to_f64_lossy() > cfg.divergence_bound) {
            return Err(Error::NonConvergence("Cox coefficients diverged (possible separation)".into()));
        }
        if change < tol {
            return finish(data, beta, iter, cfg, l1_gamma.is_none());
        }
    }
    Err(Error::NonConvergence(format!("Cox fit did not converge in {} iterations", cfg.max_iter)))
}

/// Unpenalized fit restricted to `support`; the other coefficients are zero.
pub fn cox_fit_support<T: Real>(data: &CompleteDataset<T>, support: &[usize], cfg: &CoxConfig) -> Result<CoxFit<T>> {
    let sub = data.columns(support);
    let fit = cox_fit(&sub, None, cfg)?;
    let mut beta = vec![T::zero(); data.dim()];
    for (&j, &b) in support.iter().zip(&fit.beta) {
        beta[j] = b;
    }
    Ok(CoxFit { beta, ..fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct CoxPath<T> {
    pub gamma_max: T,
    pub points: Vec<PathPoint<T>>,
    pub selected: usize,
    pub refit: CoxFit<T>,
}

/// Penalized partial likelihood over a γ grid, BIC on unpenalized refits.
pub fn cox_lasso_path<T: Real>(data: &CompleteDataset<T>, lasso: &LassoConfig, cfg: &CoxConfig) -> Result<CoxPath<T>> {
    lasso.validate()?;
    if data.n_events() < 2 {
        return Err(Error::InvalidInput("the penalized path needs at least two events".into()));
    }
    if data.dim() >= data.n() {
        return Err(Error::InvalidInput(format!("need p < n, got p = {} and n = {}", data.dim(), data.n())));
    }
    let st = if lasso.standardize { data.moments() } else { Standardization::identity(data.dim()) };
    let sdata = data.scaled(&st);
    let n = data.n();
    let gmax = max_abs(&partial_likelihood(&sdata, &vec![T::zero(); data.dim()]).grad) / T::from_usize_lossy(n);
    let grid: Vec<T> = match &lasso.gamma_grid {
        Some(g) => g.iter().map(|&x| T::lit(x)).collect(),
        None => {
            gamma_grid(gmax.to_f64_lossy(), lasso.n_gammas, lasso.gamma_min_ratio).into_iter().map(T::lit).collect()
        }
    };
    let mut current = vec![T::zero(); data.dim()];
    let mut points = Vec::with_capacity(grid.len());
    let mut refits: BTreeMap<Vec<usize>, Result<CoxFit<T>>> = BTreeMap::new();
    let mut selected: Option<(usize, T)> = None;
    for (k, &gamma) in grid.iter().enumerate() {
        let start = if lasso.warm_start { current.clone() } else { vec![T::zero(); data.dim()] };
        let point = match cox_fit_from(&sdata, Some(gamma), cfg, &start) {
            Ok(fit) => {
                current = fit.beta.clone();
                let beta: Vec<T> = fit.beta.iter().zip(&st.scale).map(|(&b, &s)| b / s).collect();
                let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != T::zero()).collect();
                let refit = refits.entry(active.clone()).or_insert_with(|| cox_fit_support(data, &active, cfg));
                match refit {
                    Ok(r) => {
                        let b = bic(r.loglik, n, active.len());
                        if selected.is_none_or(|(_, best)| b < best) {
                            selected = Some((k, b));
                        }
                        PathPoint {
                            gamma,
                            beta,
                            active,
                            loglik: Some(r.loglik),
                            bic: Some(b),
                            converged: true,
                            max_descent: None,
                            error: None,
                        }
                    }
                    Err(e) => PathPoint {
                        gamma,
                        beta,
                        active,
                        loglik: None,
                        bic: None,
                        converged: true,
                        max_descent: None,
                        error: Some(format!("refit failed: {e}")),
                    },
                }
            }
            Err(e) => PathPoint {
                gamma,
                beta: Vec::new(),
                active: Vec::new(),
                loglik: None,
                bic: None,
                converged: false,
                max_descent: None,
                error: Some(e.to_string()),
            },
        };
        points.push(point);
    }
    let Some((selected, _)) = selected else {
        return Err(Error::NonConvergence("every point of the Cox γ path failed".into()));
    };
    let refit = refits[&points[selected].active].clone()?;
    Ok(CoxPath { gamma_max: gmax, points, selected, refit })
}

/// Rows with every covariate observed.
pub fn complete_case<T: Real>(data: &Dataset<T>) -> Result<CompleteDataset<T>> {
    let kept = data.filter(|s| s.mask.is_complete())?;
    if kept.n() == 0 || kept.n_events() == 0 {
        return Err(Error::InvalidInput("no fully observed subject with an event".into()));
    }
    CompleteDataset::from_dataset(&kept)
}

/// Complete-case Cox regression.
pub fn complete_case_fit<T: Real>(data: &Dataset<T>, cfg: &CoxConfig) -> Result<CoxFit<T>> {
    cox_fit(&complete_case(data)?, None, cfg)
}

/// Complete-case LASSO path with BIC refits.
pub fn complete_case_path<T: Real>(data: &Dataset<T>, lasso: &LassoConfig, cfg: &CoxConfig) -> Result<CoxPath<T>> {
    cox_lasso_path(&complete_case(data)?, lasso, cfg)
}

/// Gaussian moments (1/n divisor) of the fully observed rows.
pub fn complete_row_moments<T: Real>(data: &Dataset<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let p = data.p();
    let rows: Vec<&ObservedSubject<T>> = data.subjects().iter().filter(|s| s.mask.is_complete()).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidInput("single imputation needs at least two fully observed rows".into()));
    }
    let k = T::from_usize_lossy(rows.len());
    let mut mu = vec![T::zero(); p];
    for s in &rows {
        for j in 0..p {
            mu[j] = mu[j] + s.x_obs[j];
        }
    }
    for m in &mut mu {
        *m = *m / k;
    }
    let mut sigma = Matrix::zeros(p, p);
    for s in &rows {
        let r: Vec<T> = (0..p).map(|j| s.x_obs[j] - mu[j]).collect();
        sigma.syr_upper(T::one() / k, &r);
    }
    sigma.mirror_upper();
    Ok((mu, sigma))
}

/// Replaces each missing block by its conditional mean under the
/// complete-row Gaussian fit.
pub fn single_impute<T: Real>(data: &Dataset<T>) -> Result<CompleteDataset<T>> {
    if data.is_complete() {
        return CompleteDataset::from_dataset(data);
    }
    let (mu, sigma) = complete_row_moments(data)?;
    let mut laws: BTreeMap<Vec<bool>, ConditionalLaw<T>> = BTreeMap::new();
    let p = data.p();
    let mut subjects = Vec::with_capacity(data.n());
    for s in data.subjects() {
        if s.mask.is_complete() {
            subjects.push(s.clone());
            continue;
        }
        let key = s.mask.flags().to_vec();
        if !laws.contains_key(&key) {
            laws.insert(key.clone(), ConditionalLaw::new(&mu, &sigma, &s.mask)?);
        }
        let fill = laws[&key].mean(&s.x_obs);
        let mut x = vec![T::zero(); p];
        for (&j, &v) in s.mask.observed().iter().zip(&s.x_obs) {
            x[j] = v;
        }
        for (&j, &v) in s.mask.missing().iter().zip(&fill) {
            x[j] = v;
        }
        subjects.push(ObservedSubject::complete(s.y, s.delta, x).with_fixed(s.fixed.clone()));
    }
    CompleteDataset::from_dataset(&Dataset::with_names(subjects, p, data.q(), data.names().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::MissingMask;

    fn four() -> CompleteDataset<f64> {
        CompleteDataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, false, true],
            Matrix::from_rows(&[vec![1.0], vec![0.0], vec![1.0], vec![0.0]]),
        )
        .unwrap()
    }

    #[test]
    fn four_subject_scalar_search() {
        let d = four();
        let fit = cox_fit(&d, None, &CoxConfig::default()).unwrap();
        // golden-section search on the hand-written partial likelihood
        let pl = |b: f64| {
            let e = b.exp();
            b - (2.0 * e + 2.0).ln() - (e + 2.0).ln() - 0.0
        };
        let (mut lo, mut hi) = (-5.0_f64, 5.0_f64);
        let r = (5.0_f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if pl(a) > pl(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        assert!((fit.beta[0] - 0.5 * (lo + hi)).abs() < 1e-6);
        // stationarity gives e^{2β} = 2
        assert!((fit.beta[0] - 0.5 * 2.0_f64.ln()).abs() < 1e-12);
        assert!((fit.loglik - pl(fit.beta[0])).abs() < 1e-12);
        assert!(fit.score_max < 1e-8);
    }

    #[test]
    fn ties_use_breslow() {
        let d = CompleteDataset::new(
            vec![1.0, 1.0, 2.0],
            vec![true, true, true],
            Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.5]]),
        )
        .unwrap();
        let b = 0.3_f64;
        let pl = partial_likelihood(&d, &[b]);
        let s0 = b.exp() + 1.0 + (0.5 * b).exp();
        let want = b - 2.0 * s0.ln() + 0.5 * b - 0.5 * b;
        assert!((pl.loglik - want).abs() < 1e-14);
        assert_eq!(pl.times, vec![1.0, 2.0]);
        assert!((pl.jumps[0] - 2.0 / s0).abs() < 1e-14);
        assert!((pl.jumps[1] - 1.0 / (0.5 * b).exp()).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_differences() {
        let d = CompleteDataset::new(
            vec![0.5, 1.2, 1.2, 2.0, 3.1, 0.7],
            vec![true, false, true, true, false, true],
            Matrix::from_rows(&[
                vec![0.3, -1.0],
                vec![1.1, 0.2],
                vec![-0.4, 0.5],
                vec![0.0, 1.5],
                vec![2.0, -0.3],
                vec![-1.2, 0.1],
            ]),
        )
        .unwrap();
        let beta = [0.4_f64, -0.2];
        let pl = partial_likelihood(&d, &beta);
        let h = 1e-5_f64;
        for j in 0..2 {
            let mut up = beta;
            let mut dn = beta;
            up[j] += h;
            dn[j] -= h;
            let fd = (partial_likelihood(&d, &up).loglik - partial_likelihood(&d, &dn).loglik) / (2.0 * h);
            assert!((fd - pl.grad[j]).abs() < 1e-8);
            let gd: Vec<f64> = (0..2)
                .map(|k| (partial_likelihood(&d, &up).grad[k] - partial_likelihood(&d, &dn).grad[k]) / (2.0 * h))
                .collect();
            for k in 0..2 {
                assert!((gd[k] - pl.hess[(k, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn separation_is_reported() {
        let d = CompleteDataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, true, true],
            Matrix::from_rows(&[vec![3.0], vec![2.0], vec![1.0], vec![0.0]]),
        )
        .unwrap();
        let r = cox_fit(&d, None, &CoxConfig::default());
        assert!(matches!(r, Err(Error::NonConvergence(_))), "{r:?}");
    }

    #[test]
    fn huge_penalty_gives_zero() {
        let d = four();
        let fit = cox_fit(&d, Some(10.0), &CoxConfig::default()).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
    }

    fn with_missing() -> Dataset<f64> {
        let subjects = vec![
            ObservedSubject::complete(1.0, true, vec![0.0, 1.0]),
            ObservedSubject::complete(2.0, false, vec![2.0, 3.0]),
            ObservedSubject::complete(3.0, true, vec![1.0, 0.0]),
            ObservedSubject::new(4.0, true, MissingMask::from_missing(2, &[1]), vec![1.0]),
            ObservedSubject::new(5.0, false, MissingMask::from_missing(2, &[0]), vec![2.0]),
        ];
        Dataset::new(subjects, 2, 0).unwrap()
    }

    #[test]
    fn complete_case_drops_incomplete_rows() {
        let d = with_missing();
        let cc = complete_case(&d).unwrap();
        assert_eq!(cc.n(), 3);
        assert_eq!(cc.y(), &[1.0, 2.0, 3.0]);
        let empty = Dataset::new(vec![ObservedSubject::new(1.0, true, MissingMask::all(1), vec![])], 1, 0).unwrap();
        assert!(complete_case(&empty).is_err());
    }

    #[test]
    fn imputation_uses_complete_row_mle() {
        let d = with_missing();
        let (mu, sigma) = complete_row_moments(&d).unwrap();
        assert_eq!(mu, vec![1.0, 4.0 / 3.0]);
        assert!((sigma[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        let cov01 = (1.0 / 3.0 + 5.0 / 3.0) / 3.0;
        assert!((sigma[(0, 1)] - cov01).abs() < 1e-15);
        let imp = single_impute(&d).unwrap();
        assert_eq!(imp.x().row(3)[0], 1.0);
        let want = mu[1] + sigma[(1, 0)] / sigma[(0, 0)] * (1.0 - mu[0]);
        assert!((imp.x().row(3)[1] - want).abs() < 1e-14);
        assert_eq!(imp.x().row(4)[1], 2.0);
    }

    #[test]
    fn imputation_is_identity_on_complete_data() {
        let d = CompleteDataset::new(vec![1.0, 2.0], vec![true, false], Matrix::from_rows(&[vec![0.5], vec![1.5]]))
            .unwrap();
        let back = single_impute(&d.to_dataset(1).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
