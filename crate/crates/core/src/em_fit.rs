//! EM for the nonparametric MLE: Gaussian moment updates, one Newton step on
//! the profiled partial likelihood per iteration, Breslow-type baseline update.

use serde::{Deserialize, Serialize};

use crate::data::{Baseline, Dataset, ParameterSet};
use crate::error::{Error, Result};
use crate::estep::{EStep, EStepConfig, SubjectExpectations};
use crate::gaussian::Completion;
use crate::linalg::{dot, max_abs, psd_project, sym_eigen, Cholesky, Matrix};
use crate::quadrature::DEFAULT_ORDER;
use crate::real::Real;

/// Allowed decrease of the observed log-likelihood between iterations.
pub const ASCENT_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Convergence threshold on the max-abs parameter change.
    pub tol: f64,
    pub quad_order: usize,
    pub step_halving_max: usize,
    pub verbose: bool,
    pub completion: Completion,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            quad_order: DEFAULT_ORDER,
            step_halving_max: 20,
            verbose: false,
            completion: Completion::Householder,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("em.tol must be positive and em.max_iter at least 1".into()));
        }
        if self.quad_order < crate::quadrature::MIN_ORDER {
            return Err(Error::Config(format!("quadrature order must be at least {}", crate::quadrature::MIN_ORDER)));
        }
        Ok(())
    }

    pub fn estep(&self) -> EStepConfig {
        EStepConfig { quad_order: self.quad_order, completion: self.completion, ..EStepConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct FitResult<T> {
    pub params: ParameterSet<T>,
    pub loglik: T,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood (minus the penalty, for penalized fits) at
    /// the start of every iteration, then at the final estimate.
    pub loglik_trace: Vec<T>,
    /// `‖∂Q/∂β‖_∞ / n` over the free coordinates at the final estimate.
    pub score_max: T,
    /// Iterations in which no step-halving produced an ascent.
    pub stalled_steps: usize,
}

impl<T: Real> FitResult<T> {
    /// Largest drop between consecutive trace entries (zero if monotone).
    pub fn max_descent(&self) -> T {
        self.loglik_trace.windows(2).map(|w| w[0] - w[1]).fold(T::zero(), T::max)
    }
}

/// Event-time bookkeeping for risk-set sums `Σ_{j: Yⱼ ≥ t}`.
#[derive(Clone, Debug)]
pub struct RiskSets<T> {
    /// Subjects ordered by ascending follow-up time (ties by index).
    order: Vec<usize>,
    times: Vec<T>,
    counts: Vec<T>,
    /// Position in `order` of the first subject with `Y ≥ times[k]`.
    start: Vec<usize>,
    /// For each subject, the number of event times `≤ Yⱼ`.
    n_before: Vec<usize>,
    events: Vec<usize>,
}

impl<T: Real> RiskSets<T> {
    pub fn new(data: &Dataset<T>) -> Self {
        let ys: Vec<T> = data.subjects().iter().map(|s| s.y).collect();
        let mut order: Vec<usize> = (0..ys.len()).collect();
        order.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).expect("finite times").then(a.cmp(&b)));
        let (times, counts) = data.event_times();
        let start = times.iter().map(|&t| order.partition_point(|&i| ys[i] < t)).collect();
        let n_before = ys.iter().map(|&y| times.partition_point(|&t| t <= y)).collect();
        let events = data.subjects().iter().enumerate().filter(|(_, s)| s.delta).map(|(i, _)| i).collect();
        Self { order, times, counts: counts.into_iter().map(T::from_usize_lossy).collect(), start, n_before, events }
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn counts(&self) -> &[T] {
        &self.counts
    }

    pub fn events(&self) -> &[usize] {
        &self.events
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// `S⁰(t_k) = Σ_{Yⱼ ≥ t_k} rⱼ` for every event time.
    pub fn s0(&self, r: &[T]) -> Vec<T> {
        let mut suffix = vec![T::zero(); self.order.len() + 1];
        for pos in (0..self.order.len()).rev() {
            suffix[pos] = suffix[pos + 1] + r[self.order[pos]];
        }
        self.start.iter().map(|&s| suffix[s]).collect()
    }

    /// `log S⁰(t_k)` from log-weights, shifted to avoid overflow.
    pub fn log_s0(&self, log_r: &[T]) -> Vec<T> {
        let m = log_r.iter().copied().fold(T::neg_infinity(), T::max);
        let r: Vec<T> = log_r.iter().map(|&l| (l - m).exp()).collect();
        self.s0(&r).into_iter().map(|s| s.ln() + m).collect()
    }

    /// `cⱼ = Σ_{t_k ≤ Yⱼ} d_k / S⁰(t_k)`: how much subject `j` enters the risk-set sums.
    pub fn cumulative_weights(&self, s0: &[T]) -> Vec<T> {
        let mut cum = vec![T::zero(); s0.len() + 1];
        for k in 0..s0.len() {
            cum[k + 1] = cum[k] + self.counts[k] / s0[k];
        }
        self.n_before.iter().map(|&k| cum[k]).collect()
    }

    /// Risk-set sums of vectors `vⱼ` (weighted by `rⱼ`) at every event time.
    fn s1(&self, r: &[T], v: impl Fn(usize) -> Vec<T>, dim: usize) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); dim]; self.times.len()];
        let mut acc = vec![T::zero(); dim];
        let mut pos = self.order.len();
        for k in (0..self.times.len()).rev() {
            while pos > self.start[k] {
                pos -= 1;
                let j = self.order[pos];
                for (a, x) in acc.iter_mut().zip(v(j)) {
                    *a = *a + r[j] * x;
                }
            }
            out[k].clone_from(&acc);
        }
        out
    }
}

/// Profiled `Q(β)` with the E-step frozen: `Σ_{Δᵢ=1} βᵀE[Xᵢ] − Σ_k d_k log S⁰_β(t_k)`.
pub fn profile_q<T: Real>(es: &EStep<T>, rs: &RiskSets<T>, event_sum: &[T], beta: &[T]) -> T {
    profile_q_from(rs, event_sum, beta, &es.log_erisk_at(beta))
}

fn profile_q_from<T: Real>(rs: &RiskSets<T>, event_sum: &[T], beta: &[T], log_erisk: &[T]) -> T {
    let log_s0 = rs.log_s0(log_erisk);
    dot(beta, event_sum) - rs.counts.iter().zip(&log_s0).map(|(&d, &l)| d * l).sum::<T>()
}

/// `Σ_{Δᵢ=1} E[Xᵢ]`.
pub fn event_sum<T: Real>(es: &EStep<T>, rs: &RiskSets<T>) -> Vec<T> {
    let mut w = vec![T::zero(); es.n()];
    for &i in rs.events() {
        w[i] = T::one();
    }
    es.weighted_first(&w, false)
}

/// Gradient and Hessian of `Q` at the β the E-step ran at.
pub fn score_hessian<T: Real>(es: &EStep<T>, rs: &RiskSets<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let n = es.n();
    let erisk: Vec<T> = (0..n).map(|i| es.erisk(i)).collect();
    let s0 = rs.s0(&erisk);
    if s0.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::Numeric("risk-set sum is not positive and finite".into()));
    }
    let mut grad = event_sum(es, rs);
    let dim = grad.len();
    let s1 = rs.s1(&erisk, |j| es.tilted_mean(j), dim);
    let c = rs.cumulative_weights(&s0);
    let w: Vec<T> = c.iter().zip(&erisk).map(|(&ci, &ei)| ci * ei).collect();
    let mut info = es.weighted_second(&w, true);
    let mut bar_sq = Matrix::zeros(dim, dim);
    for ((s1k, &s0k), &dk) in s1.iter().zip(&s0).zip(&rs.counts) {
        let bar: Vec<T> = s1k.iter().map(|&x| x / s0k).collect();
        for (g, &b) in grad.iter_mut().zip(&bar) {
            *g = *g - dk * b;
        }
        bar_sq.syr_upper(dk, &bar);
    }
    bar_sq.mirror_upper();
    info = info.sub(&bar_sq);
    info.symmetrize();
    Ok((grad, info.scaled(-T::one())))
}

/// Reference score/Hessian from fully expanded expectations.
pub fn profile_score_hessian<T: Real>(
    expectations: &[SubjectExpectations<T>],
    data: &Dataset<T>,
) -> Result<(Vec<T>, Matrix<T>)> {
    if expectations.len() != data.n() {
        return Err(Error::InvalidInput("one expectation record per subject is required".into()));
    }
    let dim = data.dim();
    let rs = RiskSets::new(data);
    let mut grad = vec![T::zero(); dim];
    for &i in rs.events() {
        for (g, &x) in grad.iter_mut().zip(&expectations[i].ex) {
            *g = *g + x;
        }
    }
    let mut hess = Matrix::zeros(dim, dim);
    let mut s0 = T::zero();
    let mut s1 = vec![T::zero(); dim];
    let mut s2 = Matrix::zeros(dim, dim);
    let mut pos = rs.order.len();
    for k in (0..rs.n_times()).rev() {
        while pos > rs.start[k] {
            pos -= 1;
            let e = &expectations[rs.order[pos]];
            s0 = s0 + e.erisk;
            for (a, &x) in s1.iter_mut().zip(&e.erisk_x) {
                *a = *a + x;
            }
            s2.add_scaled(T::one(), &e.erisk_xx);
        }
        if !(s0 > T::zero()) || !s0.is_finite() {
            return Err(Error::Numeric("risk-set sum is not positive and finite".into()));
        }
        let d = rs.counts[k];
        let bar: Vec<T> = s1.iter().map(|&x| x / s0).collect();
        for (g, &b) in grad.iter_mut().zip(&bar) {
            *g = *g - d * b;
        }
        for a in 0..dim {
            for b in 0..dim {
                hess[(a, b)] = hess[(a, b)] - d * (s2[(a, b)] / s0 - bar[a] * bar[b]);
            }
        }
    }
    Ok((grad, hess))
}

/// `μ = n⁻¹ Σ E[X]`, `Σ = n⁻¹ Σ E[XXᵀ] − μμᵀ` over the first `p` coordinates.
pub fn update_mu_sigma<T: Real>(expectations: &[SubjectExpectations<T>], p: usize) -> Result<(Vec<T>, Matrix<T>)> {
    if expectations.is_empty() {
        return Err(Error::InvalidInput("no expectation records".into()));
    }
    let n = T::from_usize_lossy(expectations.len());
    let mut mu = vec![T::zero(); p];
    let mut second = Matrix::zeros(p, p);
    for e in expectations {
        for j in 0..p {
            mu[j] = mu[j] + e.ex[j];
            for k in 0..p {
                second[(j, k)] = second[(j, k)] + e.exx[(j, k)];
            }
        }
    }
    finish_mu_sigma(mu, second, n)
}

fn finish_mu_sigma<T: Real>(mut mu: Vec<T>, second: Matrix<T>, n: T) -> Result<(Vec<T>, Matrix<T>)> {
    let p = mu.len();
    for m in &mut mu {
        *m = *m / n;
    }
    let mut sigma = Matrix::from_fn(p, p, |j, k| second[(j, k)] / n - mu[j] * mu[k]);
    sigma.symmetrize();
    if p > 0 && Cholesky::new(&sigma).is_none() {
        let scale = sigma.diagonal().into_iter().fold(T::zero(), T::max).max(T::min_positive_value());
        for j in 0..p {
            sigma[(j, j)] = sigma[(j, j)] + T::lit(1e-10) * scale;
        }
        if Cholesky::new(&sigma).is_none() {
            return Err(Error::Numeric("updated covariance is not positive definite".into()));
        }
    }
    Ok((mu, sigma))
}

fn update_mu_sigma_fast<T: Real>(es: &EStep<T>) -> Result<(Vec<T>, Matrix<T>)> {
    let p = es.p();
    let ones = vec![T::one(); es.n()];
    let first = es.weighted_first(&ones, false);
    let second = es.weighted_second(&ones, false);
    let block = second.select(&(0..p).collect::<Vec<_>>(), &(0..p).collect::<Vec<_>>());
    finish_mu_sigma(first[..p].to_vec(), block, T::from_usize_lossy(es.n()))
}

/// Result of one safeguarded Newton step.
#[derive(Clone, Debug, PartialEq)]
pub struct NewtonStep<T> {
    pub beta: Vec<T>,
    /// Objective at the accepted point.
    pub value: T,
    pub halvings: usize,
    /// No ascent found; `beta` is the starting point.
    pub stalled: bool,
}

/// Solves `(−H) d = g`, adding a growing ridge if `−H` is not positive definite.
pub fn newton_direction<T: Real>(grad: &[T], hess: &Matrix<T>) -> Result<Vec<T>> {
    let neg = hess.scaled(-T::one());
    let mut ridge = T::zero();
    for _ in 0..12 {
        let mut m = neg.clone();
        for j in 0..m.rows() {
            m[(j, j)] = m[(j, j)] + ridge;
        }
        if let Some(c) = Cholesky::new(&m) {
            let d = c.solve(grad);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        let scale = neg.diagonal().into_iter().map(T::abs).fold(T::one(), T::max);
        ridge = if ridge == T::zero() { T::lit(1e-8) } else { ridge * T::lit(100.0) }.max(T::lit(1e-8) * scale);
    }
    Err(Error::Numeric("Hessian could not be regularized to negative definite".into()))
}

/// One Newton step from `beta_k` on the free coordinates, halved until `q` does not decrease.
pub fn newton_update<T: Real>(
    beta_k: &[T],
    grad: &[T],
    hess: &Matrix<T>,
    q: impl Fn(&[T]) -> T,
    step_halving_max: usize,
) -> Result<NewtonStep<T>> {
    let q0 = q(beta_k);
    if grad.iter().all(|&g| g == T::zero()) {
        return Ok(NewtonStep { beta: beta_k.to_vec(), value: q0, halvings: 0, stalled: false });
    }
    let d = newton_direction(grad, hess)?;
    // Predicted gain below the roundoff of q: accept the full step.
    let predicted = T::lit(0.5) * dot(grad, &d);
    let roundoff = T::lit(64.0) * T::epsilon() * (T::one() + q0.abs());
    let mut step = T::one();
    for h in 0..=step_halving_max {
        let beta: Vec<T> = beta_k.iter().zip(&d).map(|(&b, &di)| b + step * di).collect();
        let value = q(&beta);
        if value.is_finite() && (value >= q0 || predicted.abs() < roundoff) {
            return Ok(NewtonStep { beta, value, halvings: h, stalled: false });
        }
        step = step * T::lit(0.5);
    }
    Ok(NewtonStep { beta: beta_k.to_vec(), value: q0, halvings: step_halving_max, stalled: true })
}

/// `λ_k = d_k / Σ_{Yⱼ ≥ t_k} erisk_newⱼ`.
pub fn breslow_update<T: Real>(data: &Dataset<T>, erisk_new: &[T]) -> Result<Baseline<T>> {
    let rs = RiskSets::new(data);
    breslow_from(&rs, &rs.s0(erisk_new))
}

fn breslow_from<T: Real>(rs: &RiskSets<T>, s0: &[T]) -> Result<Baseline<T>> {
    let jumps: Vec<T> = rs.counts.iter().zip(s0).map(|(&d, &s)| d / s).collect();
    if jumps.iter().any(|j| !(j.is_finite() && *j > T::zero())) {
        return Err(Error::Numeric("baseline jump is not positive and finite".into()));
    }
    Baseline::new(rs.times.clone(), jumps)
}

pub fn observed_loglik<T: Real>(params: &ParameterSet<T>, data: &Dataset<T>, quad_order: usize) -> Result<T> {
    EStep::run(data, params, &EStepConfig::with_order(quad_order))?.loglik()
}

/// Nelson–Aalen jumps `d_k / #{Yⱼ ≥ t_k}`.
pub fn nelson_aalen<T: Real>(data: &Dataset<T>) -> Result<Baseline<T>> {
    breslow_update(data, &vec![T::one(); data.n()])
}

/// `β = 0`, available-case means, pairwise-complete covariances (projected to
/// positive definite), Nelson–Aalen baseline.
pub fn initial_params<T: Real>(data: &Dataset<T>) -> Result<ParameterSet<T>> {
    let p = data.p();
    let (mean, _) = data.available_case_moments();
    let mu = mean[..p].to_vec();
    let mut sigma = Matrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let mut acc = T::zero();
            let mut cnt = 0usize;
            for s in data.subjects() {
                if let (Some(a), Some(b)) = (s.value(j, p), s.value(k, p)) {
                    acc = acc + (a - mu[j]) * (b - mu[k]);
                    cnt += 1;
                }
            }
            let v = if cnt > 0 {
                acc / T::from_usize_lossy(cnt)
            } else if j == k {
                T::one()
            } else {
                T::zero()
            };
            sigma[(j, k)] = v;
            sigma[(k, j)] = v;
        }
    }
    for j in 0..p {
        if !(sigma[(j, j)] > T::zero()) {
            sigma[(j, j)] = T::one();
        }
    }
    if p > 0 {
        let mean_diag = sigma.diagonal().into_iter().sum::<T>() / T::from_usize_lossy(p);
        let floor = T::lit(1e-4) * mean_diag;
        let (vals, _) = sym_eigen(&sigma);
        if vals.iter().any(|&v| v < floor) {
            sigma = psd_project(&sigma, floor);
        }
    }
    Ok(ParameterSet { beta: vec![T::zero(); data.dim()], baseline: nelson_aalen(data)?, mu, sigma })
}

/// Re-targets a parameter set to `data`'s event times, keeping `β, μ, Σ` and
/// the shape of `Λ` where possible.
pub fn adapt_params<T: Real>(data: &Dataset<T>, start: &ParameterSet<T>) -> Result<ParameterSet<T>> {
    let (times, _) = data.event_times();
    let mut prev = T::zero();
    let mut jumps = Vec::with_capacity(times.len());
    for &t in &times {
        let c = start.baseline.cumulative_hazard(t);
        jumps.push(c - prev);
        prev = c;
    }
    let baseline =
        if jumps.iter().all(|&j| j > T::zero()) { Baseline::new(times, jumps)? } else { nelson_aalen(data)? };
    let params = ParameterSet { beta: start.beta.clone(), baseline, mu: start.mu.clone(), sigma: start.sigma.clone() };
    params.validate(data)?;
    Ok(params)
}

/// What one iteration's β-update produced.
pub(crate) struct BetaUpdate<T> {
    pub beta: Vec<T>,
    /// `log E_k[e^{Xᵀβ}]` at the new β, per subject.
    pub log_erisk: Vec<T>,
    pub stalled: bool,
}

/// Shared EM driver; `update_beta` is the M-step for β.
pub(crate) fn run_em<T: Real>(
    data: &Dataset<T>,
    config: &FitConfig,
    init: ParameterSet<T>,
    free: &[usize],
    penalty: impl Fn(&[T]) -> T,
    mut update_beta: impl FnMut(&EStep<T>, &RiskSets<T>, &[T]) -> Result<BetaUpdate<T>>,
) -> Result<FitResult<T>> {
    config.validate()?;
    if data.n_events() == 0 {
        return Err(Error::InvalidInput("at least one event is required".into()));
    }
    let estep_config = config.estep();
    let rs = RiskSets::new(data);
    let mut params = init;
    params.validate(data)?;
    let mut trace: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut stalled_steps = 0;
    for it in 0..config.max_iter {
        let es = EStep::run(data, &params, &estep_config)?;
        let ll = es.loglik()? - penalty(&params.beta);
        if let Some(&prev) = trace.last() {
            if ll < prev - T::lit(ASCENT_SLACK) {
                log::warn!("observed log-likelihood decreased by {:e} at iteration {it}", (prev - ll).to_f64_lossy());
            }
        }
        trace.push(ll);
        let (mu, sigma) = update_mu_sigma_fast(&es)?;
        let update = update_beta(&es, &rs, &params.beta)?;
        stalled_steps += usize::from(update.stalled);
        let s0 = rs.log_s0(&update.log_erisk).into_iter().map(T::exp).collect::<Vec<_>>();
        let baseline = breslow_from(&rs, &s0)?;
        let next = ParameterSet { beta: update.beta, baseline, mu, sigma };
        let change = params.max_abs_change(&next);
        params = next;
        iterations = it + 1;
        if config.verbose {
            log::info!("iteration {iterations}: loglik {:.10} change {:e}", ll.to_f64_lossy(), change.to_f64_lossy());
        }
        if change < T::lit(config.tol) {
            converged = true;
            break;
        }
    }
    let es = EStep::run(data, &params, &estep_config)?;
    let loglik = es.loglik()?;
    trace.push(loglik - penalty(&params.beta));
    let (grad, _) = score_hessian(&es, &rs)?;
    let free_grad: Vec<T> = free.iter().map(|&j| grad[j]).collect();
    let score_max = max_abs(&free_grad) / T::from_usize_lossy(data.n());
    Ok(FitResult { params, loglik, iterations, converged, loglik_trace: trace, score_max, stalled_steps })
}

/// Full-vector Newton step restricted to `free` coordinates.
pub(crate) fn newton_beta<T: Real>(
    es: &EStep<T>,
    rs: &RiskSets<T>,
    beta_k: &[T],
    free: &[usize],
    step_halving_max: usize,
) -> Result<BetaUpdate<T>> {
    if free.is_empty() {
        return Ok(BetaUpdate { beta: beta_k.to_vec(), log_erisk: es.log_erisk_at(beta_k), stalled: false });
    }
    let (grad, hess) = score_hessian(es, rs)?;
    let g: Vec<T> = free.iter().map(|&j| grad[j]).collect();
    let h = hess.select(free, free);
    let esum = event_sum(es, rs);
    let embed = |sub: &[T]| {
        let mut b = beta_k.to_vec();
        for (&j, &v) in free.iter().zip(sub) {
            b[j] = v;
        }
        b
    };
    let start: Vec<T> = free.iter().map(|&j| beta_k[j]).collect();
    let step = newton_update(&start, &g, &h, |sub| profile_q(es, rs, &esum, &embed(sub)), step_halving_max)?;
    let beta = embed(&step.beta);
    let log_erisk = es.log_erisk_at(&beta);
    Ok(BetaUpdate { beta, log_erisk, stalled: step.stalled })
}

fn all_free(support: Option<&[usize]>, dim: usize) -> Result<Vec<usize>> {
    match support {
        None => Ok((0..dim).collect()),
        Some(s) => {
            let mut v = s.to_vec();
            v.sort_unstable();
            v.dedup();
            if v.iter().any(|&j| j >= dim) {
                return Err(Error::InvalidInput("support index out of range".into()));
            }
            Ok(v)
        }
    }
}

/// Unpenalized NPMLE; with `support`, coefficients outside it are held at zero.
pub fn fit_npmle<T: Real>(data: &Dataset<T>, config: &FitConfig, support: Option<&[usize]>) -> Result<FitResult<T>> {
    fit_npmle_from(data, config, support, initial_params(data)?)
}

/// As [`fit_npmle`], started from `init` (its β is zeroed outside the support).
pub fn fit_npmle_from<T: Real>(
    data: &Dataset<T>,
    config: &FitConfig,
    support: Option<&[usize]>,
    mut init: ParameterSet<T>,
) -> Result<FitResult<T>> {
    let free = all_free(support, data.dim())?;
    if init.beta.len() == data.dim() {
        let mut keep = vec![false; data.dim()];
        for &j in &free {
            keep[j] = true;
        }
        for (b, k) in init.beta.iter_mut().zip(keep) {
            if !k {
                *b = T::zero();
            }
        }
    }
    let halving = config.step_halving_max;
    let free_ref = free.clone();
    run_em(data, config, init, &free, |_| T::zero(), move |es, rs, beta| newton_beta(es, rs, beta, &free_ref, halving))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedSubject;

    fn small_data() -> Dataset<f64> {
        let rows: Vec<(f64, bool, [Option<f64>; 3])> = vec![
            (0.5, true, [Some(0.3), None, Some(-1.0)]),
            (1.2, false, [Some(-0.4), Some(0.8), None]),
            (0.9, true, [None, Some(0.1), Some(0.5)]),
            (2.0, true, [Some(1.1), Some(-0.6), Some(0.2)]),
            (0.9, true, [Some(0.0), None, None]),
            (1.7, false, [Some(-1.2), Some(0.4), Some(0.9)]),
            (0.3, true, [Some(0.5), Some(0.5), None]),
            (2.5, false, [None, Some(-0.2), Some(-0.3)]),
        ];
        let subjects = rows.into_iter().map(|(y, d, r)| ObservedSubject::from_row(y, d, &r)).collect();
        Dataset::new(subjects, 3, 0).unwrap()
    }

    fn some_params(data: &Dataset<f64>) -> ParameterSet<f64> {
        let mut p = initial_params(data).unwrap();
        p.beta = vec![0.4, -0.3, 0.2];
        p
    }

    #[test]
    fn mu_sigma_hand_sums() {
        let one = |x: f64| SubjectExpectations {
            ex: vec![x],
            exx: Matrix::from_rows(&[vec![1.0]]),
            erisk: 1.0,
            erisk_x: vec![x],
            erisk_xx: Matrix::from_rows(&[vec![1.0]]),
        };
        let (mu, sigma) = update_mu_sigma(&[one(1.0), one(-1.0)], 1).unwrap();
        assert_eq!(mu, vec![0.0]);
        assert_eq!(sigma[(0, 0)], 1.0);
        let (mu, sigma) = update_mu_sigma(&[one(0.0)], 1).unwrap();
        assert_eq!((mu[0], sigma[(0, 0)]), (0.0, 1.0));
    }

    #[test]
    fn fast_paths_match_reference() {
        let data = small_data();
        let params = some_params(&data);
        let es = EStep::run(&data, &params, &EStepConfig::default()).unwrap();
        let full = es.all_expectations();
        let (mu_a, sig_a) = update_mu_sigma(&full, 3).unwrap();
        let (mu_b, sig_b) = update_mu_sigma_fast(&es).unwrap();
        assert!(crate::linalg::max_abs_diff(&mu_a, &mu_b) < 1e-13);
        assert!(sig_a.max_abs_diff(&sig_b) < 1e-12);
        let rs = RiskSets::new(&data);
        let (g_a, h_a) = profile_score_hessian(&full, &data).unwrap();
        let (g_b, h_b) = score_hessian(&es, &rs).unwrap();
        assert!(crate::linalg::max_abs_diff(&g_a, &g_b) < 1e-12);
        assert!(h_a.max_abs_diff(&h_b) < 1e-12);
    }

    #[test]
    fn newton_stationary_and_quadratic() {
        let hess = Matrix::from_rows(&[vec![-2.0, 0.5], vec![0.5, -1.0]]);
        let target = [0.3, -0.7];
        let q = |b: &[f64]| {
            let d = [b[0] - target[0], b[1] - target[1]];
            0.5 * hess.quad_form(&d)
        };
        let s = newton_update(&target, &[0.0, 0.0], &hess, q, 20).unwrap();
        assert_eq!(s.beta, target.to_vec());
        let start = [0.0, 0.0];
        let grad = hess.matvec(&[start[0] - target[0], start[1] - target[1]]);
        let s = newton_update(&start, &grad, &hess, q, 20).unwrap();
        assert!(crate::linalg::max_abs_diff(&s.beta, &target) < 1e-14);
        assert_eq!(s.halvings, 0);
    }

    #[test]
    fn nelson_aalen_at_zero_beta() {
        let data = small_data();
        let b = nelson_aalen(&data).unwrap();
        // times 0.3, 0.5, 0.9 (two events), 2.0 with 8, 7, 6, 2 at risk
        assert_eq!(b.times(), &[0.3, 0.5, 0.9, 2.0]);
        let want = [1.0 / 8.0, 1.0 / 7.0, 2.0 / 6.0, 1.0 / 2.0];
        assert!(crate::linalg::max_abs_diff(b.jumps(), &want) < 1e-15);
    }

    #[test]
    fn single_subject_breslow() {
        let s = ObservedSubject::complete(1.0, true, vec![0.2]);
        let data = Dataset::new(vec![s], 1, 0).unwrap();
        let b = breslow_update(&data, &[2.5]).unwrap();
        assert_eq!(b.jumps(), &[0.4]);
    }

    #[test]
    fn em_ascends_on_small_data() {
        let data = small_data();
        let fit = fit_npmle(&data, &FitConfig { max_iter: 60, ..FitConfig::default() }, None).unwrap();
        assert!(fit.max_descent() <= ASCENT_SLACK, "descent {}", fit.max_descent());
    }

    #[test]
    fn empty_support_keeps_beta_zero() {
        let data = small_data();
        let fit = fit_npmle(&data, &FitConfig::default(), Some(&[])).unwrap();
        assert!(fit.params.beta.iter().all(|&b| b == 0.0));
        assert!(fit.converged);
    }
}
