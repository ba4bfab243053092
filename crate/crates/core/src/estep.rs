//! Conditional expectations of the covariates given each subject's observed data.
//!
//! Every expectation reduces to a one-dimensional integral over the first
//! rotated coordinate `X̃₁ = uᵀX_R` with `u = β_R/‖β_R‖`; the remaining rotated
//! coordinates are Gaussian given `X̃₁`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Baseline, Dataset, ObservedSubject, ParameterSet};
use crate::error::{Error, Result};
use crate::gaussian::{
    conditional_mvn, rotate_slice_with, Completion, GaussianModel, MissingMask, PatternLaw, SliceGeometry,
};
use crate::linalg::{dot, norm2, Matrix};
use crate::quadrature::{agh_expect, AdaptiveNodes, QuadratureRule, TiltedDensity, DEFAULT_ORDER};
use crate::real::Real;

/// `‖β_R‖` below this counts as zero.
pub const ZERO_BETA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct SubjectExpectations<T> {
    pub ex: Vec<T>,
    pub exx: Matrix<T>,
    pub erisk: T,
    pub erisk_x: Vec<T>,
    pub erisk_xx: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EStepConfig {
    pub quad_order: usize,
    pub completion: Completion,
    /// Threshold on `‖β_R‖` for the closed-form branch.
    pub zero_threshold: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self { quad_order: DEFAULT_ORDER, completion: Completion::Householder, zero_threshold: ZERO_BETA }
    }
}

impl EStepConfig {
    pub fn with_order(quad_order: usize) -> Self {
        Self { quad_order, ..Self::default() }
    }
}

pub fn cumulative_hazard<T: Real>(baseline: &Baseline<T>, t: T) -> T {
    baseline.cumulative_hazard(t)
}

fn check_subject<T: Real>(subject: &ObservedSubject<T>, params: &ParameterSet<T>) -> Result<()> {
    let p = params.mu.len();
    if subject.mask.p() != p || params.beta.len() != p + subject.fixed.len() {
        return Err(Error::InvalidInput("subject and parameter dimensions differ".into()));
    }
    if subject.x_obs.len() != subject.mask.observed().len() {
        return Err(Error::InvalidInput("x_obs length does not match the mask".into()));
    }
    Ok(())
}

fn missing_part<T: Real>(beta: &[T], mask: &MissingMask) -> Vec<T> {
    mask.missing().iter().map(|&j| beta[j]).collect()
}

/// Full-length vector: observed and fixed values in place, `fill` at the missing coordinates.
fn scatter<T: Real>(subject: &ObservedSubject<T>, fill: &[T]) -> Vec<T> {
    let p = subject.mask.p();
    let mut v = vec![T::zero(); p + subject.fixed.len()];
    for (&j, &x) in subject.mask.observed().iter().zip(&subject.x_obs) {
        v[j] = x;
    }
    for (&j, &x) in subject.mask.missing().iter().zip(fill) {
        v[j] = x;
    }
    v[p..].copy_from_slice(&subject.fixed);
    v
}

/// Second-moment matrix whose known-known block is `weight·x xᵀ`, known-missing
/// block `x · firstᵀ` and missing-missing block `block`.
fn assemble_second<T: Real>(values: &[T], missing: &[usize], weight: T, first: &[T], block: &Matrix<T>) -> Matrix<T> {
    let dim = values.len();
    let mut is_mis = vec![usize::MAX; dim];
    for (k, &j) in missing.iter().enumerate() {
        is_mis[j] = k;
    }
    Matrix::from_fn(dim, dim, |a, b| match (is_mis[a], is_mis[b]) {
        (usize::MAX, usize::MAX) => weight * (values[a] * values[b]),
        (usize::MAX, kb) => values[a] * first[kb],
        (ka, usize::MAX) => first[ka] * values[b],
        (ka, kb) => block[(ka, kb)],
    })
}

fn closed_form_inner<T: Real>(
    subject: &ObservedSubject<T>,
    params: &ParameterSet<T>,
) -> Result<SubjectExpectations<T>> {
    let cond = conditional_mvn(&params.mu, &params.sigma, &subject.mask, &subject.x_obs)?;
    let beta_r = missing_part(&params.beta, &subject.mask);
    let ex = scatter(subject, &cond.mean);
    let missing = subject.mask.missing();
    let mut block = cond.cov.clone();
    for a in 0..missing.len() {
        for b in 0..missing.len() {
            block[(a, b)] = block[(a, b)] + cond.mean[a] * cond.mean[b];
        }
    }
    let exx = assemble_second(&ex, missing, T::one(), &cond.mean, &block);
    let lin = subject.observed_offset(&params.beta) + dot(&beta_r, &cond.mean);
    let erisk = (lin + T::lit(0.5) * cond.cov.quad_form(&beta_r)).exp();
    let erisk_x = ex.iter().map(|&v| erisk * v).collect();
    let erisk_xx = exx.scaled(erisk);
    Ok(SubjectExpectations { ex, exx, erisk, erisk_x, erisk_xx })
}

/// Expectations when `β_R = 0`: the missing block keeps its Gaussian
/// conditional law and `e^{Xᵀβ}` is fixed by the observed coordinates.
pub fn closed_form_expectations<T: Real>(
    subject: &ObservedSubject<T>,
    params: &ParameterSet<T>,
) -> Result<SubjectExpectations<T>> {
    check_subject(subject, params)?;
    let beta_r = missing_part(&params.beta, &subject.mask);
    if !(norm2(&beta_r) < T::lit(ZERO_BETA)) {
        return Err(Error::ContractViolation("closed-form expectations need β_R = 0".into()));
    }
    closed_form_inner(subject, params)
}

pub fn subject_expectations<T: Real>(
    subject: &ObservedSubject<T>,
    params: &ParameterSet<T>,
    quad_order: usize,
) -> Result<SubjectExpectations<T>> {
    subject_expectations_with(subject, params, &EStepConfig::with_order(quad_order))
}

/// Direct evaluation of the five expectation blocks for one subject.
pub fn subject_expectations_with<T: Real>(
    subject: &ObservedSubject<T>,
    params: &ParameterSet<T>,
    config: &EStepConfig,
) -> Result<SubjectExpectations<T>> {
    check_subject(subject, params)?;
    let beta_r = missing_part(&params.beta, &subject.mask);
    if beta_r.is_empty() || norm2(&beta_r) < T::lit(config.zero_threshold) {
        return closed_form_inner(subject, params);
    }
    let cond = conditional_mvn(&params.mu, &params.sigma, &subject.mask, &subject.x_obs)?;
    let slice = rotate_slice_with(&cond, &beta_r, config.completion)?;
    let b = slice.geometry.bnorm;
    let offset = subject.observed_offset(&params.beta);
    let (m1, m2, e0, e1, e2) = if slice.is_degenerate() {
        let x = slice.eta[0];
        let e = (b * x).exp();
        (x, x * x, e, e * x, e * x * x)
    } else {
        let density = TiltedDensity {
            delta: subject.delta,
            bnorm: b,
            cumhaz: params.baseline.cumulative_hazard(subject.y),
            offset,
            center: slice.eta[0],
            variance: slice.geometry.nu11(),
        };
        let rule = QuadratureRule::gauss_hermite(config.quad_order)?;
        let mom = agh_expect(|x| vec![x, x * x], &density, &rule)?;
        let nodes = AdaptiveNodes::new(&density, &rule)?;
        let (risk_nodes, lm) = nodes.retilted(&density, &rule, b)?;
        let e0 = lm.exp();
        let (_, t1, t2) = risk_nodes.tilted_moments(T::zero());
        (mom[0], mom[1], e0, e0 * t1, e0 * t2)
    };

    // Rotated-frame moments of (X̃₁, X̃₋₁) with X̃₋₁ | X̃₁ ~ N(c + s X̃₁, V).
    let c = &slice.intercept;
    let s = slice.slope();
    let v = slice.v();
    let d = slice.eta.len();
    let rotated = |g0: T, g1: T, g2: T| {
        let mut first = vec![g1];
        first.extend(c.iter().zip(s).map(|(&ci, &si)| ci * g0 + si * g1));
        let mut second = Matrix::zeros(d, d);
        second[(0, 0)] = g2;
        for i in 1..d {
            let cross = c[i - 1] * g1 + s[i - 1] * g2;
            second[(0, i)] = cross;
            second[(i, 0)] = cross;
            for j in 1..d {
                let (ci, cj, si, sj) = (c[i - 1], c[j - 1], s[i - 1], s[j - 1]);
                second[(i, j)] = (v[(i - 1, j - 1)] + ci * cj) * g0 + (ci * sj + si * cj) * g1 + si * sj * g2;
            }
        }
        let rot = &slice.geometry.rotation;
        (rot.apply_t(&first), rot.conj_t(&second))
    };
    let missing = subject.mask.missing();
    let (ex_r, exx_r) = rotated(T::one(), m1, m2);
    let ex = scatter(subject, &ex_r);
    let exx = assemble_second(&ex, missing, T::one(), &ex_r, &exx_r);

    let scale = offset.exp();
    let erisk = scale * e0;
    let (rx, rxx) = rotated(e0, e1, e2);
    let erisk_x_r: Vec<T> = rx.iter().map(|&x| scale * x).collect();
    let p = subject.mask.p();
    let erisk_x: Vec<T> = scatter(subject, &erisk_x_r)
        .into_iter()
        .enumerate()
        .map(|(j, x)| if j < p && subject.mask.is_missing(j) { x } else { erisk * x })
        .collect();
    let erisk_xx = assemble_second(&ex, missing, erisk, &erisk_x_r, &rxx.scaled(scale));
    if !erisk.is_finite() || !(erisk > T::zero()) {
        return Err(Error::integration(None, "risk expectation is not finite and positive"));
    }
    Ok(SubjectExpectations { ex, exx, erisk, erisk_x, erisk_xx })
}

/// `E_k[exp(Xᵀβ_new) | 𝒪ᵢ]` under the iteration-`k` conditional law.
pub fn erisk_at_new_beta<T: Real>(
    subject: &ObservedSubject<T>,
    params_k: &ParameterSet<T>,
    beta_new: &[T],
    quad_order: usize,
) -> Result<T> {
    check_subject(subject, params_k)?;
    if beta_new.len() != params_k.beta.len() {
        return Err(Error::InvalidInput("beta_new has the wrong length".into()));
    }
    let beta_r = missing_part(&params_k.beta, &subject.mask);
    let new_r = missing_part(beta_new, &subject.mask);
    let offset_new = subject.observed_offset(beta_new);
    let value = if beta_r.is_empty() || norm2(&beta_r) < T::lit(ZERO_BETA) {
        if new_r.is_empty() {
            offset_new.exp()
        } else {
            let cond = conditional_mvn(&params_k.mu, &params_k.sigma, &subject.mask, &subject.x_obs)?;
            (offset_new + dot(&new_r, &cond.mean) + T::lit(0.5) * cond.cov.quad_form(&new_r)).exp()
        }
    } else {
        let cond = conditional_mvn(&params_k.mu, &params_k.sigma, &subject.mask, &subject.x_obs)?;
        let slice = rotate_slice_with(&cond, &beta_r, Completion::Householder)?;
        let a = slice.geometry.rotation.apply(&new_r);
        // h(x) = e^{a₀x}·E[e^{a₋₁ᵀX̃₋₁} | X̃₁ = x] is log-linear in x
        let log_h0 = dot(&a[1..], &slice.intercept) + T::lit(0.5) * slice.v().quad_form(&a[1..]);
        let kappa = a[0] + dot(&a[1..], slice.slope());
        let log_inner = if slice.is_degenerate() {
            log_h0 + kappa * slice.eta[0]
        } else {
            let density = TiltedDensity {
                delta: subject.delta,
                bnorm: slice.geometry.bnorm,
                cumhaz: params_k.baseline.cumulative_hazard(subject.y),
                offset: subject.observed_offset(&params_k.beta),
                center: slice.eta[0],
                variance: slice.geometry.nu11(),
            };
            let rule = QuadratureRule::gauss_hermite(quad_order)?;
            let nodes = AdaptiveNodes::new(&density, &rule)?;
            log_h0 + nodes.retilted(&density, &rule, kappa)?.1
        };
        let inner = log_inner.exp();
        offset_new.exp() * inner
    };
    if !value.is_finite() || !(value > T::zero()) {
        return Err(Error::integration(None, "risk expectation at the new β overflowed"));
    }
    Ok(value)
}

/// Quantities shared by every subject with the same missingness pattern.
#[derive(Clone, Debug)]
pub(crate) struct Pattern<T> {
    pub mask: MissingMask,
    pub law: PatternLaw<T>,
    /// `None`: closed-form branch (`β_R = 0` or nothing missing).
    pub geometry: Option<SliceGeometry<T>>,
    /// Direction `σ̄ = Ψᵀ(1, s)` along which `X_R` moves with `X̃₁` (zero when closed).
    pub dir: Vec<T>,
    /// `W = Ψᵀ diag(0, V) Ψ`, or the conditional covariance when closed.
    pub w: Matrix<T>,
}

/// One subject's E-step in compact form: `X_R = α + X̃₁ σ̄ + ε`, `ε ~ N(0, W)`.
#[derive(Clone, Debug)]
pub(crate) struct Compact<T> {
    pub pattern: usize,
    /// Observed and fixed values, with `α` at the missing coordinates.
    pub base: Vec<T>,
    pub m1: T,
    pub m2: T,
    /// First two moments of `X̃₁` under the `e^{‖β_R‖X̃₁}`-tilted law.
    pub t1: T,
    pub t2: T,
    pub log_erisk: T,
    /// `None` when the subject has an event at a time without a baseline jump.
    pub loglik: Option<T>,
    /// `‖β_R‖` and `log E[e^{‖β_R‖X̃₁}]`.
    pub tilt: T,
    pub log_mgf_tilt: T,
    /// Nodes adapted to the tilted law.
    pub risk_nodes: AdaptiveNodes<T>,
}

/// E-step results for a whole dataset at one parameter value.
#[derive(Clone, Debug)]
pub struct EStep<T> {
    pub(crate) p: usize,
    pub(crate) patterns: Vec<Pattern<T>>,
    pub(crate) subjects: Vec<Compact<T>>,
}

impl<T: Real> EStep<T> {
    /// Runs on the current rayon pool; output does not depend on the pool size.
    pub fn run(data: &Dataset<T>, params: &ParameterSet<T>, config: &EStepConfig) -> Result<Self> {
        params.validate(data)?;
        let model = GaussianModel::new(&params.mu, &params.sigma)?;
        let rule = QuadratureRule::gauss_hermite(config.quad_order)?;

        let mut index: HashMap<&MissingMask, usize> = HashMap::new();
        let mut masks: Vec<&MissingMask> = Vec::new();
        let assignment: Vec<usize> = data
            .subjects()
            .iter()
            .map(|s| {
                *index.entry(&s.mask).or_insert_with(|| {
                    masks.push(&s.mask);
                    masks.len() - 1
                })
            })
            .collect();

        let patterns: Vec<Pattern<T>> =
            masks.par_iter().map(|mask| build_pattern(&model, mask, &params.beta, config)).collect::<Result<_>>()?;

        let subjects: Vec<Compact<T>> = data
            .subjects()
            .par_iter()
            .zip(assignment.par_iter())
            .enumerate()
            .map(|(i, (s, &k))| {
                compact_subject(s, k, &patterns[k], &model, params, &rule).map_err(|e| e.with_subject(i))
            })
            .collect::<Result<_>>()?;

        Ok(Self { p: data.p(), patterns, subjects })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn erisk(&self, i: usize) -> T {
        self.subjects[i].log_erisk.exp()
    }

    pub fn log_erisk(&self, i: usize) -> T {
        self.subjects[i].log_erisk
    }

    /// Observed-data log-likelihood at the parameters the E-step ran at.
    pub fn loglik(&self) -> Result<T> {
        if let Some(i) = self.subjects.iter().position(|s| s.loglik.is_none()) {
            return Err(Error::InvalidInput(format!("subject {i} has an event at a time with no baseline jump")));
        }
        Ok(crate::real::compensated_sum(self.subjects.iter().filter_map(|s| s.loglik)))
    }

    /// Per-subject observed-data log-likelihood contributions.
    pub fn loglik_terms(&self) -> Vec<Option<T>> {
        self.subjects.iter().map(|s| s.loglik).collect()
    }

    /// Expands subject `i` into the full expectation blocks.
    pub fn expectations(&self, i: usize) -> SubjectExpectations<T> {
        let s = &self.subjects[i];
        let pat = &self.patterns[s.pattern];
        let missing = pat.mask.missing();
        let expand = |k1: T, k2: T| {
            let mut first = s.base.clone();
            for (&j, &dj) in missing.iter().zip(&pat.dir) {
                first[j] = first[j] + k1 * dj;
            }
            let mut second = Matrix::from_fn(first.len(), first.len(), |a, b| s.base[a] * s.base[b]);
            for (ka, &ja) in missing.iter().enumerate() {
                let da = pat.dir[ka];
                for (b, &xb) in s.base.iter().enumerate() {
                    let t = k1 * da * xb;
                    second[(ja, b)] = second[(ja, b)] + t;
                    second[(b, ja)] = second[(b, ja)] + t;
                }
                for (kb, &jb) in missing.iter().enumerate() {
                    second[(ja, jb)] = second[(ja, jb)] + pat.w[(ka, kb)] + k2 * da * pat.dir[kb];
                }
            }
            (first, second)
        };
        let (ex, exx) = expand(s.m1, s.m2);
        let erisk = s.log_erisk.exp();
        let (rx, rxx) = expand(s.t1, s.t2);
        SubjectExpectations {
            ex,
            exx,
            erisk,
            erisk_x: rx.iter().map(|&v| erisk * v).collect(),
            erisk_xx: rxx.scaled(erisk),
        }
    }

    pub fn all_expectations(&self) -> Vec<SubjectExpectations<T>> {
        (0..self.n()).map(|i| self.expectations(i)).collect()
    }

    /// `log E_k[exp(Xᵢᵀβ) | 𝒪ᵢ]` for every subject, with the conditional laws
    /// frozen at the parameters this E-step ran at.
    pub fn log_erisk_at(&self, beta: &[T]) -> Vec<T> {
        let half = T::lit(0.5);
        let per_pattern: Vec<(T, T)> = self
            .patterns
            .iter()
            .map(|pat| {
                let br = missing_part(beta, &pat.mask);
                (half * pat.w.quad_form(&br), dot(&br, &pat.dir))
            })
            .collect();
        self.subjects
            .iter()
            .map(|s| {
                let (kappa, tau) = per_pattern[s.pattern];
                dot(beta, &s.base) + kappa + s.log_mgf_tilt + s.risk_nodes.log_mgf(tau - s.tilt)
            })
            .collect()
    }

    /// `Σᵢ wᵢ E[Xᵢ]` (or the tilted version `Σᵢ wᵢ E[e^{Xᵢᵀβ}Xᵢ]/E[e^{Xᵢᵀβ}]`).
    pub(crate) fn weighted_first(&self, w: &[T], tilted: bool) -> Vec<T> {
        let dim = self.subjects.first().map_or(0, |s| s.base.len());
        let mut out = vec![T::zero(); dim];
        for (s, &wi) in self.subjects.iter().zip(w) {
            let k1 = if tilted { s.t1 } else { s.m1 };
            for (o, &b) in out.iter_mut().zip(&s.base) {
                *o = *o + wi * b;
            }
            let pat = &self.patterns[s.pattern];
            for (&j, &dj) in pat.mask.missing().iter().zip(&pat.dir) {
                out[j] = out[j] + wi * k1 * dj;
            }
        }
        out
    }

    /// `Σᵢ wᵢ E[XᵢXᵢᵀ]` (or its tilted version), accumulated pattern-wise.
    pub(crate) fn weighted_second(&self, w: &[T], tilted: bool) -> Matrix<T> {
        let dim = self.subjects.first().map_or(0, |s| s.base.len());
        let mut out = Matrix::zeros(dim, dim);
        let np = self.patterns.len();
        let mut sw = vec![T::zero(); np];
        let mut s2 = vec![T::zero(); np];
        let mut u = vec![vec![T::zero(); dim]; np];
        for (s, &wi) in self.subjects.iter().zip(w) {
            out.syr_upper(wi, &s.base);
            let (k1, k2) = if tilted { (s.t1, s.t2) } else { (s.m1, s.m2) };
            let k = s.pattern;
            sw[k] = sw[k] + wi;
            s2[k] = s2[k] + wi * k2;
            if k1 != T::zero() {
                let c = wi * k1;
                for (uj, &b) in u[k].iter_mut().zip(&s.base) {
                    *uj = *uj + c * b;
                }
            }
        }
        out.mirror_upper();
        for (k, pat) in self.patterns.iter().enumerate() {
            let missing = pat.mask.missing();
            for (ka, &ja) in missing.iter().enumerate() {
                let da = pat.dir[ka];
                if da != T::zero() {
                    for b in 0..dim {
                        let t = u[k][b] * da;
                        out[(ja, b)] = out[(ja, b)] + t;
                        out[(b, ja)] = out[(b, ja)] + t;
                    }
                }
                for (kb, &jb) in missing.iter().enumerate() {
                    out[(ja, jb)] = out[(ja, jb)] + sw[k] * pat.w[(ka, kb)] + s2[k] * da * pat.dir[kb];
                }
            }
        }
        out
    }

    /// `E[e^{Xᵢᵀβ}Xᵢ] / E[e^{Xᵢᵀβ}]`.
    pub(crate) fn tilted_mean(&self, i: usize) -> Vec<T> {
        let s = &self.subjects[i];
        let pat = &self.patterns[s.pattern];
        let mut v = s.base.clone();
        for (&j, &dj) in pat.mask.missing().iter().zip(&pat.dir) {
            v[j] = v[j] + s.t1 * dj;
        }
        v
    }

    /// Number of Gaussian covariates.
    pub fn p(&self) -> usize {
        self.p
    }
}

fn build_pattern<T: Real>(
    model: &GaussianModel<T>,
    mask: &MissingMask,
    beta: &[T],
    config: &EStepConfig,
) -> Result<Pattern<T>> {
    let law = model.pattern(mask)?;
    let beta_r = missing_part(beta, mask);
    let d = beta_r.len();
    if d == 0 || norm2(&beta_r) < T::lit(config.zero_threshold) {
        let w = law.cov().clone();
        return Ok(Pattern { mask: mask.clone(), law, geometry: None, dir: vec![T::zero(); d], w });
    }
    let geometry = SliceGeometry::new(law.cov(), &beta_r, config.completion)?;
    let mut e = vec![T::one()];
    e.extend_from_slice(&geometry.slope);
    let dir = geometry.rotation.apply_t(&e);
    let mut padded = Matrix::zeros(d, d);
    for i in 1..d {
        for j in 1..d {
            padded[(i, j)] = geometry.v[(i - 1, j - 1)];
        }
    }
    let w = geometry.rotation.conj_t(&padded);
    Ok(Pattern { mask: mask.clone(), law, geometry: Some(geometry), dir, w })
}

fn compact_subject<T: Real>(
    s: &ObservedSubject<T>,
    k: usize,
    pat: &Pattern<T>,
    model: &GaussianModel<T>,
    params: &ParameterSet<T>,
    rule: &QuadratureRule<T>,
) -> Result<Compact<T>> {
    let (cm, log_obs) = model.condition(&pat.law, &s.x_obs);
    let offset = s.observed_offset(&params.beta);
    let cumhaz = params.baseline.cumulative_hazard(s.y);
    let log_jump = if s.delta { params.baseline.jump_at(s.y).map(|l| l.ln()) } else { Some(T::zero()) };
    let event = if s.delta { T::one() } else { T::zero() };
    let Some(geo) = &pat.geometry else {
        let beta_r = missing_part(&params.beta, &pat.mask);
        let lin = offset + dot(&beta_r, &cm);
        let loglik = log_jump.map(|lj| log_obs + event * (lj + lin) - cumhaz * lin.exp());
        return Ok(Compact {
            pattern: k,
            base: scatter(s, &cm),
            m1: T::zero(),
            m2: T::zero(),
            t1: T::zero(),
            t2: T::zero(),
            log_erisk: lin + T::lit(0.5) * pat.w.quad_form(&beta_r),
            loglik,
            tilt: T::zero(),
            log_mgf_tilt: T::zero(),
            risk_nodes: AdaptiveNodes::point_mass(T::zero()),
        });
    };
    let (eta, intercept) = geo.locate(&cm);
    let mut shifted = vec![T::zero()];
    shifted.extend_from_slice(&intercept);
    let alpha = geo.rotation.apply_t(&shifted);
    let b = geo.bnorm;
    let (nodes, risk_nodes, lm, loglik) = if geo.degenerate {
        let lin = offset + b * eta[0];
        let loglik = log_jump.map(|lj| log_obs + event * (lj + lin) - cumhaz * lin.exp());
        (AdaptiveNodes::point_mass(eta[0]), AdaptiveNodes::point_mass(eta[0]), b * eta[0], loglik)
    } else {
        let nu11 = geo.nu11();
        let density = TiltedDensity { delta: s.delta, bnorm: b, cumhaz, offset, center: eta[0], variance: nu11 };
        let nodes = AdaptiveNodes::new(&density, rule)?;
        let (risk_nodes, lm) = nodes.retilted(&density, rule, b)?;
        let log_norm = T::lit(0.5) * (T::lit(2.0 * std::f64::consts::PI) * nu11).ln();
        let loglik = log_jump.map(|lj| log_obs + event * (lj + offset) + nodes.log_integral - log_norm);
        (nodes, risk_nodes, lm, loglik)
    };
    let (_, m1, m2) = nodes.tilted_moments(T::zero());
    let (_, t1, t2) = risk_nodes.tilted_moments(T::zero());
    let log_erisk = offset + lm;
    if !log_erisk.is_finite() {
        return Err(Error::integration(None, "non-finite risk expectation"));
    }
    Ok(Compact {
        pattern: k,
        base: scatter(s, &alpha),
        m1,
        m2,
        t1,
        t2,
        log_erisk,
        loglik,
        tilt: b,
        log_mgf_tilt: lm,
        risk_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;

    fn params(beta: Vec<f64>, mu: Vec<f64>, sigma: Matrix<f64>) -> ParameterSet<f64> {
        ParameterSet { beta, baseline: Baseline::new(vec![0.5, 1.0, 2.0], vec![0.1, 0.1, 0.2]).unwrap(), mu, sigma }
    }

    fn sigma3() -> Matrix<f64> {
        Matrix::from_rows(&[vec![1.0, 0.4, 0.2], vec![0.4, 1.2, -0.3], vec![0.2, -0.3, 0.8]])
    }

    fn close(a: &SubjectExpectations<f64>, b: &SubjectExpectations<f64>, tol: f64) -> bool {
        let rel = |x: f64, y: f64| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs()));
        rel(a.erisk, b.erisk)
            && a.ex.iter().zip(&b.ex).all(|(&x, &y)| rel(x, y))
            && a.erisk_x.iter().zip(&b.erisk_x).all(|(&x, &y)| rel(x, y))
            && a.exx.as_slice().iter().zip(b.exx.as_slice()).all(|(&x, &y)| rel(x, y))
            && a.erisk_xx.as_slice().iter().zip(b.erisk_xx.as_slice()).all(|(&x, &y)| rel(x, y))
    }

    #[test]
    fn empty_mask_needs_no_integration() {
        let s = ObservedSubject::complete(1.5, true, vec![0.5, -1.0, 2.0]);
        let pr = params(vec![0.3, 0.2, -0.1], vec![0.0; 3], sigma3());
        let e = closed_form_expectations(&s, &pr).unwrap();
        assert_eq!(e.ex, vec![0.5, -1.0, 2.0]);
        assert!((e.erisk - (0.15f64 - 0.2 - 0.2).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_gives_conditional_mean() {
        let s = ObservedSubject::from_row(1.5, true, &[Some(1.0), None, None]);
        let pr = params(vec![0.0; 3], vec![0.0; 3], sigma3());
        let e = subject_expectations(&s, &pr, 30).unwrap();
        assert_eq!(e.erisk, 1.0);
        let cond = conditional_mvn(&pr.mu, &pr.sigma, &s.mask, &s.x_obs).unwrap();
        assert_eq!(&e.ex[1..], &cond.mean[..]);
    }

    #[test]
    fn closed_form_rejects_nonzero_missing_beta() {
        let s = ObservedSubject::from_row(1.5, true, &[Some(1.0), None, None]);
        let pr = params(vec![0.0, 0.1, 0.0], vec![0.0; 3], sigma3());
        assert!(matches!(closed_form_expectations(&s, &pr), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn continuity_probe() {
        let s = ObservedSubject::from_row(1.5, true, &[Some(1.0), None, None]);
        let pr = params(vec![0.7, 0.0, 0.0], vec![0.1, -0.2, 0.3], sigma3());
        let closed = closed_form_expectations(&s, &pr).unwrap();
        let mut probe = pr.clone();
        probe.beta[1] = 1e-300;
        let cfg = EStepConfig { zero_threshold: 0.0, ..EStepConfig::default() };
        let rotated = subject_expectations_with(&s, &probe, &cfg).unwrap();
        assert!(close(&closed, &rotated, 1e-8));
    }

    #[test]
    fn censored_before_first_event_is_gaussian() {
        let s = ObservedSubject::from_row(0.2, false, &[Some(1.0), None, None]);
        let pr = params(vec![0.7, 0.5, -0.8], vec![0.1, -0.2, 0.3], sigma3());
        let e = subject_expectations(&s, &pr, 30).unwrap();
        let cond = conditional_mvn(&pr.mu, &pr.sigma, &s.mask, &s.x_obs).unwrap();
        assert!(max_abs_diff(&e.ex[1..], &cond.mean) < 1e-10);
        for a in 0..2 {
            for b in 0..2 {
                let want = cond.cov[(a, b)] + cond.mean[a] * cond.mean[b];
                assert!((e.exx[(a + 1, b + 1)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn engine_matches_direct_evaluation() {
        let subjects = vec![
            ObservedSubject::from_row(1.5, true, &[Some(1.0), None, None]),
            ObservedSubject::from_row(0.7, false, &[None, Some(-0.3), None]),
            ObservedSubject::from_row(2.0, true, &[Some(0.2), Some(0.1), Some(-1.0)]),
            ObservedSubject::from_row(1.0, true, &[None, None, None]),
            ObservedSubject::from_row(0.4, false, &[Some(-0.5), None, Some(0.4)]),
        ];
        let data = Dataset::new(subjects, 3, 0).unwrap();
        let pr = params(vec![0.5, -0.4, 0.3], vec![0.1, -0.2, 0.3], sigma3());
        let es = EStep::run(&data, &pr, &EStepConfig::default()).unwrap();
        for (i, s) in data.subjects().iter().enumerate() {
            let direct = subject_expectations(s, &pr, 30).unwrap();
            let fast = es.expectations(i);
            assert!(close(&direct, &fast, 1e-10), "subject {i}: {direct:?} vs {fast:?}");
            let e4 = erisk_at_new_beta(s, &pr, &pr.beta, 30).unwrap();
            assert!((e4 - direct.erisk).abs() < 1e-10 * direct.erisk);
            let newb = vec![0.1, 0.6, -0.2];
            let e4 = erisk_at_new_beta(s, &pr, &newb, 30).unwrap();
            assert!((es.log_erisk_at(&newb)[i].exp() - e4).abs() < 1e-10 * e4);
        }
    }

    #[test]
    fn observed_coordinates_are_exact() {
        let s = ObservedSubject::from_row(1.5, true, &[Some(1.0 / 3.0), None, Some(0.7)]);
        let data = Dataset::new(vec![s.clone()], 3, 0).unwrap();
        let pr = params(vec![0.5, -0.4, 0.3], vec![0.1, -0.2, 0.3], sigma3());
        let e = EStep::run(&data, &pr, &EStepConfig::default()).unwrap().expectations(0);
        assert_eq!(e.ex[0].to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(e.ex[2].to_bits(), 0.7f64.to_bits());
        assert_eq!(e.exx[(0, 2)].to_bits(), ((1.0f64 / 3.0) * 0.7).to_bits());
    }

    #[test]
    fn new_beta_with_zero_missing_part() {
        let s = ObservedSubject::from_row(1.5, true, &[Some(1.0), None, Some(2.0)]);
        let pr = params(vec![0.5, -0.4, 0.3], vec![0.1, -0.2, 0.3], sigma3());
        let v = erisk_at_new_beta(&s, &pr, &[0.2, 0.0, -0.1], 30).unwrap();
        assert!((v - (0.2f64 - 0.2).exp()).abs() < 1e-14);
    }
}
