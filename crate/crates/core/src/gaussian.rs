//! Conditional multivariate-normal algebra under a missingness mask, and the
//! orthogonal rotation that isolates the linear-predictor direction of the
//! missing block.
//!
//! For a subject with missing coordinates `R`, the missing block given the
//! observed values is `N(mean, cov)` (a Schur complement). Rotating by an
//! orthogonal `Ψ` whose first row is `β_R/‖β_R‖` turns `X_Rᵀβ_R` into
//! `‖β_R‖·X̃₁`, and the remaining rotated coordinates are Gaussian given `X̃₁`
//! with mean `intercept + slope·X̃₁` and covariance `V`. Only `X̃₁` then needs
//! numerical integration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, psd_project, Cholesky, Matrix};
use crate::real::Real;

const COV_JITTER: f64 = 1e-10;
const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Missingness indicators for one subject (`true` = missing).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<bool>", into = "Vec<bool>")]
pub struct MissingMask {
    flags: Vec<bool>,
    missing: Vec<usize>,
    observed: Vec<usize>,
}

impl MissingMask {
    pub fn new(flags: Vec<bool>) -> Self {
        let missing = flags.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect();
        let observed = flags.iter().enumerate().filter(|(_, &m)| !m).map(|(j, _)| j).collect();
        Self { flags, missing, observed }
    }

    pub fn none(p: usize) -> Self {
        Self::new(vec![false; p])
    }

    pub fn all(p: usize) -> Self {
        Self::new(vec![true; p])
    }

    pub fn from_missing(p: usize, missing: &[usize]) -> Self {
        let mut flags = vec![false; p];
        for &j in missing {
            flags[j] = true;
        }
        Self::new(flags)
    }

    pub fn p(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn is_missing(&self, j: usize) -> bool {
        self.flags[j]
    }

    pub fn n_missing(&self) -> usize {
        self.missing.len()
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

impl From<Vec<bool>> for MissingMask {
    fn from(flags: Vec<bool>) -> Self {
        Self::new(flags)
    }
}

impl From<MissingMask> for Vec<bool> {
    fn from(m: MissingMask) -> Self {
        m.flags
    }
}

impl fmt::Display for MissingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &m in &self.flags {
            f.write_str(if m { "M" } else { "." })?;
        }
        Ok(())
    }
}

/// Gaussian law of the missing block given the observed coordinates.
#[derive(Clone, Debug)]
pub struct ConditionalNormal<T> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

/// The mask-dependent part of a conditional normal, reusable across all
/// subjects sharing the mask: `mean = μ_R + B (x_obs − μ_obs)`, `cov` fixed.
#[derive(Clone, Debug)]
pub struct ConditionalLaw<T> {
    mask: MissingMask,
    mu_mis: Vec<T>,
    mu_obs: Vec<T>,
    /// `B = Σ_{R,−R} Σ_{−R,−R}⁻¹`, shape `#missing × #observed`.
    regression: Matrix<T>,
    cov: Matrix<T>,
    obs_chol: Cholesky<T>,
}

/// Cholesky factor of the observed block. Roundoff-level indefiniteness is
/// absorbed by a small ridge; a block whose smallest pivot is of the ridge's
/// order is treated as singular.
fn observed_factor<T: Real>(s_oo: &Matrix<T>) -> Option<Cholesky<T>> {
    if let Some(c) = Cholesky::new(s_oo) {
        return Some(c);
    }
    let c = Cholesky::with_jitter(s_oo, T::lit(COV_JITTER))?;
    let n = s_oo.rows();
    let scale = (0..n).map(|i| s_oo[(i, i)].abs()).fold(T::zero(), T::max).max(T::one());
    let l = c.factor();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(T::infinity(), T::min);
    (min_pivot > T::lit(100.0 * COV_JITTER) * scale).then_some(c)
}

impl<T: Real> ConditionalLaw<T> {
    pub fn new(mu: &[T], sigma: &Matrix<T>, mask: &MissingMask) -> Result<Self> {
        let p = mu.len();
        if sigma.rows() != p || sigma.cols() != p || mask.p() != p {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: mu {p}, sigma {}x{}, mask {}",
                sigma.rows(),
                sigma.cols(),
                mask.p()
            )));
        }
        let mis = mask.missing();
        let obs = mask.observed();
        let s_oo = sigma.select(obs, obs);
        let obs_chol = observed_factor(&s_oo).ok_or_else(|| Error::SingularCovariance { mask: mask.to_string() })?;
        let s_ro = sigma.select(mis, obs);
        let s_rr = sigma.select(mis, mis);
        // Bᵀ = Σ_oo⁻¹ Σ_or
        let regression = obs_chol.solve_matrix(&s_ro.transpose()).transpose();
        let mut cov = s_rr.sub(&regression.matmul(&s_ro.transpose()));
        cov.symmetrize();
        if !cov.is_finite() {
            return Err(Error::SingularCovariance { mask: mask.to_string() });
        }
        if !cov.is_square() || cov.rows() == 0 || Cholesky::new(&cov).is_some() {
            // positive definite already
        } else {
            cov = psd_project(&cov, T::zero());
        }
        Ok(Self {
            mask: mask.clone(),
            mu_mis: mis.iter().map(|&j| mu[j]).collect(),
            mu_obs: obs.iter().map(|&j| mu[j]).collect(),
            regression,
            cov,
            obs_chol,
        })
    }

    pub fn mask(&self) -> &MissingMask {
        &self.mask
    }

    pub fn cov(&self) -> &Matrix<T> {
        &self.cov
    }

    pub fn regression(&self) -> &Matrix<T> {
        &self.regression
    }

    pub fn mean(&self, x_obs: &[T]) -> Vec<T> {
        debug_assert_eq!(x_obs.len(), self.mu_obs.len());
        let centered: Vec<T> = x_obs.iter().zip(&self.mu_obs).map(|(&x, &m)| x - m).collect();
        let mut mean = self.mu_mis.clone();
        if !centered.is_empty() {
            for (i, m) in mean.iter_mut().enumerate() {
                *m = *m + dot(self.regression.row(i), &centered);
            }
        }
        mean
    }

    pub fn condition(&self, x_obs: &[T]) -> ConditionalNormal<T> {
        ConditionalNormal { mean: self.mean(x_obs), cov: self.cov.clone() }
    }

    /// Log-density of the observed coordinates under `N(μ_obs, Σ_obs,obs)`,
    /// normalizing constants included. Zero when nothing is observed.
    pub fn observed_log_density(&self, x_obs: &[T]) -> T {
        let k = x_obs.len();
        if k == 0 {
            return T::zero();
        }
        let centered: Vec<T> = x_obs.iter().zip(&self.mu_obs).map(|(&x, &m)| x - m).collect();
        let half = T::lit(0.5);
        let log2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        -half * (T::from_usize_lossy(k) * log2pi + self.obs_chol.log_det() + self.obs_chol.inv_quad_form(&centered))
    }
}

/// Conditional law of `X_R` given `X_{−R} = x_obs` under `N(μ, Σ)`.
pub fn conditional_mvn<T: Real>(
    mu: &[T],
    sigma: &Matrix<T>,
    mask: &MissingMask,
    x_obs: &[T],
) -> Result<ConditionalNormal<T>> {
    if x_obs.len() != mask.observed().len() {
        return Err(Error::InvalidInput(format!(
            "x_obs has length {} but mask {} observes {}",
            x_obs.len(),
            mask,
            mask.observed().len()
        )));
    }
    Ok(ConditionalLaw::new(mu, sigma, mask)?.condition(x_obs))
}

/// How the rows after the first are completed into an orthogonal matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    #[default]
    Householder,
    /// Gram–Schmidt over the standard basis visited in reverse order.
    GramSchmidt,
}

/// An orthogonal `Ψ` whose first row is a given unit vector.
#[derive(Clone, Debug)]
pub enum Rotation<T> {
    /// `Ψ = I − τ v vᵀ` (symmetric, so `Ψ = Ψᵀ`); `τ = 0` is the identity.
    Householder {
        v: Vec<T>,
        tau: T,
    },
    Dense(Matrix<T>),
}

impl<T: Real> Rotation<T> {
    pub fn new(beta_r: &[T], completion: Completion) -> Result<Self> {
        match completion {
            Completion::Householder => householder_reflector(beta_r),
            Completion::GramSchmidt => {
                let d = beta_r.len();
                let order: Vec<usize> = (0..d).rev().collect();
                Ok(Rotation::Dense(gram_schmidt_completion(beta_r, &order)?))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Rotation::Householder { v, .. } => v.len(),
            Rotation::Dense(m) => m.rows(),
        }
    }

    /// `Ψ x`.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        match self {
            Rotation::Householder { v, tau } => {
                let mut out = x.to_vec();
                let s = *tau * dot(v, x);
                axpy(-s, v, &mut out);
                out
            }
            Rotation::Dense(m) => m.matvec(x),
        }
    }

    /// `Ψᵀ x`.
    pub fn apply_t(&self, x: &[T]) -> Vec<T> {
        match self {
            Rotation::Householder { .. } => self.apply(x),
            Rotation::Dense(m) => m.tr_matvec(x),
        }
    }

    /// `Ψ M Ψᵀ` for symmetric `M`.
    pub fn conj(&self, m: &Matrix<T>) -> Matrix<T> {
        match self {
            Rotation::Householder { v, tau } => householder_sandwich(m, v, *tau),
            Rotation::Dense(q) => q.matmul(m).matmul(&q.transpose()),
        }
    }

    /// `Ψᵀ M Ψ` for symmetric `M`.
    pub fn conj_t(&self, m: &Matrix<T>) -> Matrix<T> {
        match self {
            Rotation::Householder { v, tau } => householder_sandwich(m, v, *tau),
            Rotation::Dense(q) => q.transpose().matmul(m).matmul(q),
        }
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        match self {
            Rotation::Householder { v, tau } => {
                let mut h = Matrix::identity(v.len());
                h.rank1_update(-*tau, v, v);
                h
            }
            Rotation::Dense(m) => m.clone(),
        }
    }
}

/// `H M H` with `H = I − τ v vᵀ` and `M` symmetric, in `O(d²)`.
fn householder_sandwich<T: Real>(m: &Matrix<T>, v: &[T], tau: T) -> Matrix<T> {
    if tau == T::zero() {
        return m.clone();
    }
    let w = m.matvec(v);
    let vw = dot(v, &w);
    // H M H = M − τ v wᵀ − τ w vᵀ + τ² (vᵀ M v) v vᵀ
    let k: Vec<T> = w.iter().zip(v).map(|(&wi, &vi)| wi - T::lit(0.5) * tau * vw * vi).collect();
    let mut out = m.clone();
    out.rank1_update(-tau, v, &k);
    out.rank1_update(-tau, &k, v);
    out.symmetrize();
    out
}

fn householder_reflector<T: Real>(beta_r: &[T]) -> Result<Rotation<T>> {
    let d = beta_r.len();
    let nrm = norm2(beta_r);
    if d == 0 || !(nrm > T::zero()) || !nrm.is_finite() {
        return Err(Error::ContractViolation(
            "householder completion needs a nonzero finite β_R; use the closed-form branch".into(),
        ));
    }
    let u: Vec<T> = beta_r.iter().map(|&b| b / nrm).collect();
    // v = u − e₁ maps e₁ ↔ u; 1 − u₁ computed without cancellation.
    let tail: T = u[1..].iter().map(|&x| x * x).sum();
    let v1 = if u[0] > T::zero() { -tail / (T::one() + u[0]) } else { u[0] - T::one() };
    let mut v = u;
    v[0] = v1;
    let vv = v1 * v1 + tail;
    if vv == T::zero() {
        return Ok(Rotation::Householder { v, tau: T::zero() });
    }
    Ok(Rotation::Householder { tau: T::lit(2.0) / vv, v })
}

/// Orthogonal `d×d` matrix whose first row is `β_R/‖β_R‖`, built as the
/// Householder reflection exchanging `e₁` and that unit vector.
pub fn householder_completion<T: Real>(beta_r: &[T]) -> Result<Matrix<T>> {
    Ok(householder_reflector(beta_r)?.to_matrix())
}

/// Alternative completion: first row `β_R/‖β_R‖`, remaining rows from
/// Gram–Schmidt over the standard basis vectors in `order`.
pub fn gram_schmidt_completion<T: Real>(beta_r: &[T], order: &[usize]) -> Result<Matrix<T>> {
    let d = beta_r.len();
    let nrm = norm2(beta_r);
    if d == 0 || !(nrm > T::zero()) {
        return Err(Error::ContractViolation("gram-schmidt completion needs a nonzero β_R".into()));
    }
    let mut basis: Vec<Vec<T>> = vec![beta_r.iter().map(|&b| b / nrm).collect()];
    for &k in order {
        if basis.len() == d {
            break;
        }
        let mut e = vec![T::zero(); d];
        e[k] = T::one();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &e);
                axpy(-c, b, &mut e);
            }
        }
        let en = norm2(&e);
        if en > T::lit(1e-6) {
            basis.push(e.iter().map(|&x| x / en).collect());
        }
    }
    if basis.len() != d {
        return Err(Error::Numeric("gram-schmidt completion ran out of basis vectors".into()));
    }
    Ok(Matrix::from_rows(&basis))
}

/// The mask- and `β_R`-dependent parts of a rotated slice.
#[derive(Clone, Debug)]
pub struct SliceGeometry<T> {
    pub rotation: Rotation<T>,
    pub bnorm: T,
    /// `ν = Ψ cov Ψᵀ`.
    pub nu: Matrix<T>,
    /// `(ν)₋₁,₁ / (ν)₁,₁`.
    pub slope: Vec<T>,
    /// `V = (ν)₋₁,₋₁ − (ν)₋₁,₁⊗² / (ν)₁,₁`.
    pub v: Matrix<T>,
    /// `(ν)₁,₁ ≤ 1e-12`: `X̃₁` is a point mass.
    pub degenerate: bool,
}

impl<T: Real> SliceGeometry<T> {
    pub fn new(cov: &Matrix<T>, beta_r: &[T], completion: Completion) -> Result<Self> {
        let rotation = Rotation::new(beta_r, completion)?;
        let nu = rotation.conj(cov);
        let d = nu.rows();
        let nu11 = nu[(0, 0)];
        let degenerate = !(nu11 > T::lit(DEGENERATE_VARIANCE));
        let col: Vec<T> = (1..d).map(|i| nu[(i, 0)]).collect();
        let (slope, v) = if degenerate {
            // X̃₁ is deterministic, so conditioning on it changes nothing.
            (vec![T::zero(); d - 1], Matrix::from_fn(d - 1, d - 1, |i, j| nu[(i + 1, j + 1)]))
        } else {
            let slope: Vec<T> = col.iter().map(|&c| c / nu11).collect();
            let mut v = Matrix::from_fn(d - 1, d - 1, |i, j| nu[(i + 1, j + 1)] - col[i] * col[j] / nu11);
            v.symmetrize();
            (slope, v)
        };
        Ok(Self { rotation, bnorm: norm2(beta_r), nu, slope, v, degenerate })
    }

    pub fn nu11(&self) -> T {
        self.nu[(0, 0)]
    }

    /// Rotated conditional mean `η = Ψ mean` and the intercept of `mᵢ(·)`.
    pub fn locate(&self, mean: &[T]) -> (Vec<T>, Vec<T>) {
        let eta = self.rotation.apply(mean);
        let intercept = eta[1..].iter().zip(&self.slope).map(|(&e, &s)| e - s * eta[0]).collect();
        (eta, intercept)
    }
}

/// Rotated view of one subject's conditional normal.
#[derive(Clone, Debug)]
pub struct RotatedSlice<T> {
    pub geometry: SliceGeometry<T>,
    pub eta: Vec<T>,
    pub intercept: Vec<T>,
}

impl<T: Real> RotatedSlice<T> {
    pub fn psi(&self) -> Matrix<T> {
        self.geometry.rotation.to_matrix()
    }

    pub fn nu(&self) -> &Matrix<T> {
        &self.geometry.nu
    }

    pub fn slope(&self) -> &[T] {
        &self.geometry.slope
    }

    pub fn v(&self) -> &Matrix<T> {
        &self.geometry.v
    }

    pub fn is_degenerate(&self) -> bool {
        self.geometry.degenerate
    }

    /// `mᵢ(x1) = intercept + slope · x1`.
    pub fn conditional_mean(&self, x1: T) -> Vec<T> {
        self.intercept.iter().zip(&self.geometry.slope).map(|(&c, &s)| c + s * x1).collect()
    }
}

pub fn rotate_slice<T: Real>(cond: &ConditionalNormal<T>, beta_r: &[T]) -> Result<RotatedSlice<T>> {
    rotate_slice_with(cond, beta_r, Completion::Householder)
}

pub fn rotate_slice_with<T: Real>(
    cond: &ConditionalNormal<T>,
    beta_r: &[T],
    completion: Completion,
) -> Result<RotatedSlice<T>> {
    if cond.mean.len() != beta_r.len() {
        return Err(Error::InvalidInput("β_R length differs from the conditional dimension".into()));
    }
    let geometry = SliceGeometry::new(&cond.cov, beta_r, completion)?;
    let (eta, intercept) = geometry.locate(&cond.mean);
    Ok(RotatedSlice { geometry, eta, intercept })
}

/// `φ(x1; a) = exp{aᵀ mᵢ(x1) + ½ aᵀ Vᵢ a}`, the conditional MGF of `X̃₋₁`.
pub fn mgf_phi<T: Real>(slice: &RotatedSlice<T>, x1: T, a: &[T]) -> T {
    if a.is_empty() {
        return T::one();
    }
    let m = slice.conditional_mean(x1);
    (dot(a, &m) + T::lit(0.5) * slice.geometry.v.quad_form(a)).exp()
}

/// `N(μ, Σ)` with its precision matrix, for computing many conditional laws
/// cheaply: each missingness pattern only needs the `Ω_RR` block.
#[derive(Clone, Debug)]
pub struct GaussianModel<T> {
    mu: Vec<T>,
    precision: Matrix<T>,
    log_det: T,
}

impl<T: Real> GaussianModel<T> {
    pub fn new(mu: &[T], sigma: &Matrix<T>) -> Result<Self> {
        let p = mu.len();
        if sigma.rows() != p || sigma.cols() != p {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: mu {p}, sigma {}x{}",
                sigma.rows(),
                sigma.cols()
            )));
        }
        let chol = observed_factor(sigma)
            .ok_or_else(|| Error::SingularCovariance { mask: MissingMask::none(p).to_string() })?;
        let mut precision = chol.inverse();
        precision.symmetrize();
        Ok(Self { mu: mu.to_vec(), precision, log_det: chol.log_det() })
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn precision(&self) -> &Matrix<T> {
        &self.precision
    }

    pub fn pattern(&self, mask: &MissingMask) -> Result<PatternLaw<T>> {
        let mis = mask.missing();
        if mis.is_empty() {
            return Ok(PatternLaw {
                mask: mask.clone(),
                rr_chol: None,
                cov: Matrix::zeros(0, 0),
                log_det_obs: self.log_det,
            });
        }
        let omega_rr = self.precision.select(mis, mis);
        let rr_chol = Cholesky::with_jitter(&omega_rr, T::lit(COV_JITTER))
            .ok_or_else(|| Error::SingularCovariance { mask: mask.to_string() })?;
        let mut cov = rr_chol.inverse();
        cov.symmetrize();
        // det Σ = det Σ_OO · det (Ω_RR)⁻¹
        let log_det_obs = if mask.observed().is_empty() { T::zero() } else { self.log_det + rr_chol.log_det() };
        Ok(PatternLaw { mask: mask.clone(), rr_chol: Some(rr_chol), cov, log_det_obs })
    }

    fn residual_terms(&self, law: &PatternLaw<T>, x_obs: &[T]) -> (Vec<T>, Vec<T>) {
        let obs = law.mask.observed();
        let r: Vec<T> = obs.iter().zip(x_obs).map(|(&j, &x)| x - self.mu[j]).collect();
        let w = law
            .mask
            .missing()
            .iter()
            .map(|&i| {
                let row = self.precision.row(i);
                obs.iter().zip(&r).fold(T::zero(), |acc, (&k, &rk)| acc + row[k] * rk)
            })
            .collect();
        (r, w)
    }

    /// `E[X_R | x_obs] = μ_R − Ω_RR⁻¹ Ω_RO (x_obs − μ_O)`.
    pub fn conditional_mean(&self, law: &PatternLaw<T>, x_obs: &[T]) -> Vec<T> {
        let Some(chol) = &law.rr_chol else {
            return Vec::new();
        };
        let (_, w) = self.residual_terms(law, x_obs);
        let shift = chol.solve(&w);
        law.mask.missing().iter().zip(shift).map(|(&i, s)| self.mu[i] - s).collect()
    }

    /// Conditional mean and the observed-block log-density in one pass.
    pub fn condition(&self, law: &PatternLaw<T>, x_obs: &[T]) -> (Vec<T>, T) {
        let obs = law.mask.observed();
        let (r, w) = self.residual_terms(law, x_obs);
        let k = obs.len();
        let mut q = T::zero();
        for (a, (&ja, &ra)) in obs.iter().zip(&r).enumerate() {
            let row = self.precision.row(ja);
            let mut s = T::zero();
            for (&jb, &rb) in obs[a + 1..].iter().zip(&r[a + 1..]) {
                s = s + row[jb] * rb;
            }
            q = q + ra * (row[ja] * ra + T::lit(2.0) * s);
        }
        let mean = match &law.rr_chol {
            Some(chol) => {
                let shift = chol.solve(&w);
                q = q - dot(&w, &shift);
                law.mask.missing().iter().zip(shift).map(|(&i, s)| self.mu[i] - s).collect()
            }
            None => Vec::new(),
        };
        let logdens = if k == 0 {
            T::zero()
        } else {
            let log2pi = T::lit((2.0 * std::f64::consts::PI).ln());
            -T::lit(0.5) * (T::from_usize_lossy(k) * log2pi + law.log_det_obs + q.max(T::zero()))
        };
        (mean, logdens)
    }
}

/// Pattern-level part of the conditional law under a [`GaussianModel`].
#[derive(Clone, Debug)]
pub struct PatternLaw<T> {
    mask: MissingMask,
    rr_chol: Option<Cholesky<T>>,
    cov: Matrix<T>,
    log_det_obs: T,
}

impl<T: Real> PatternLaw<T> {
    pub fn mask(&self) -> &MissingMask {
        &self.mask
    }

    /// `Cov(X_R | X_O) = Ω_RR⁻¹`.
    pub fn cov(&self) -> &Matrix<T> {
        &self.cov
    }
}
