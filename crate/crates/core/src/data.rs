//! Observed data and model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::MissingMask;
use crate::linalg::Matrix;
use crate::real::Real;

/// One subject's observed record `𝒪ᵢ = {Yᵢ, Δᵢ, Rᵢ, X_{i,−Rᵢ}}`.
///
/// `fixed` holds always-observed covariates that enter the hazard through `β`
/// but are not part of the Gaussian covariate model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ObservedSubject<T> {
    pub y: T,
    pub delta: bool,
    pub mask: MissingMask,
    pub x_obs: Vec<T>,
    #[serde(default)]
    pub fixed: Vec<T>,
}

impl<T: Real> ObservedSubject<T> {
    pub fn new(y: T, delta: bool, mask: MissingMask, x_obs: Vec<T>) -> Self {
        Self { y, delta, mask, x_obs, fixed: Vec::new() }
    }

    /// A fully observed subject.
    pub fn complete(y: T, delta: bool, x: Vec<T>) -> Self {
        Self::new(y, delta, MissingMask::none(x.len()), x)
    }

    /// Builds a subject from a row where `None` marks a missing value.
    pub fn from_row(y: T, delta: bool, row: &[Option<T>]) -> Self {
        let mask = MissingMask::new(row.iter().map(Option::is_none).collect());
        let x_obs = row.iter().filter_map(|v| *v).collect();
        Self::new(y, delta, mask, x_obs)
    }

    pub fn with_fixed(mut self, fixed: Vec<T>) -> Self {
        self.fixed = fixed;
        self
    }

    /// Gaussian covariates with `None` at missing positions.
    pub fn row(&self) -> Vec<Option<T>> {
        let mut out = vec![None; self.mask.p()];
        for (&j, &v) in self.mask.observed().iter().zip(&self.x_obs) {
            out[j] = Some(v);
        }
        out
    }

    /// Linear predictor contribution of the observed and fixed coordinates.
    pub fn observed_offset(&self, beta: &[T]) -> T {
        let p = self.mask.p();
        let mut s = T::zero();
        for (&j, &v) in self.mask.observed().iter().zip(&self.x_obs) {
            s = s + beta[j] * v;
        }
        for (k, &z) in self.fixed.iter().enumerate() {
            s = s + beta[p + k] * z;
        }
        s
    }

    fn validate(&self, p: usize, q: usize) -> Result<()> {
        if !(self.y > T::zero()) || !self.y.is_finite() {
            return Err(Error::InvalidInput(format!("follow-up time must be finite and positive, got {}", self.y)));
        }
        if self.mask.p() != p {
            return Err(Error::InvalidInput(format!("mask has {} entries, expected {p}", self.mask.p())));
        }
        if self.x_obs.len() != self.mask.observed().len() {
            return Err(Error::InvalidInput("observed values do not match the mask".into()));
        }
        if self.fixed.len() != q {
            return Err(Error::InvalidInput(format!("expected {q} fixed covariates, got {}", self.fixed.len())));
        }
        if self.x_obs.iter().chain(&self.fixed).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariate values must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    subjects: Vec<ObservedSubject<T>>,
    /// Number of Gaussian covariates.
    p: usize,
    /// Number of fixed (always observed, non-Gaussian) covariates.
    q: usize,
    names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(subjects: Vec<ObservedSubject<T>>, p: usize, q: usize) -> Result<Self> {
        let names = (1..=p + q).map(|j| format!("x{j}")).collect();
        Self::with_names(subjects, p, q, names)
    }

    pub fn with_names(subjects: Vec<ObservedSubject<T>>, p: usize, q: usize, names: Vec<String>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidInput("dataset has no subjects".into()));
        }
        if p + q == 0 {
            return Err(Error::InvalidInput("dataset has no covariates".into()));
        }
        if names.len() != p + q {
            return Err(Error::InvalidInput("covariate names do not match the dimension".into()));
        }
        for (i, s) in subjects.iter().enumerate() {
            s.validate(p, q).map_err(|e| match e {
                Error::InvalidInput(m) => Error::InvalidInput(format!("subject {i}: {m}")),
                other => other,
            })?;
        }
        Ok(Self { subjects, p, q, names })
    }

    /// Fully observed data from a covariate matrix (rows = subjects).
    pub fn from_complete(y: &[T], delta: &[bool], x: &[Vec<T>]) -> Result<Self> {
        if y.len() != delta.len() || y.len() != x.len() {
            return Err(Error::InvalidInput("y, delta and x lengths differ".into()));
        }
        let p = x.first().map_or(0, Vec::len);
        let subjects =
            y.iter().zip(delta).zip(x).map(|((&y, &d), row)| ObservedSubject::complete(y, d, row.clone())).collect();
        Self::new(subjects, p, 0)
    }

    pub fn subjects(&self) -> &[ObservedSubject<T>] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &ObservedSubject<T> {
        &self.subjects[i]
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Length of `β`.
    pub fn dim(&self) -> usize {
        self.p + self.q
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.delta).count()
    }

    /// Sorted unique event times `t₁ < … < t_m` and tie counts `d_j`.
    pub fn event_times(&self) -> (Vec<T>, Vec<usize>) {
        let mut ts: Vec<T> = self.subjects.iter().filter(|s| s.delta).map(|s| s.y).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let mut times: Vec<T> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for t in ts {
            if times.last() == Some(&t) {
                *counts.last_mut().expect("nonempty") += 1;
            } else {
                times.push(t);
                counts.push(1);
            }
        }
        (times, counts)
    }

    /// Per-column fraction of missing Gaussian covariates.
    pub fn missing_fractions(&self) -> Vec<f64> {
        let n = self.n() as f64;
        (0..self.p).map(|j| self.subjects.iter().filter(|s| s.mask.is_missing(j)).count() as f64 / n).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.subjects.iter().all(|s| s.mask.is_complete())
    }

    /// Same covariate layout, different subjects (e.g. a bootstrap resample).
    pub fn resample(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            p: self.p,
            q: self.q,
            names: self.names.clone(),
        }
    }

    /// Keeps only subjects satisfying the predicate.
    pub fn filter(&self, keep: impl Fn(&ObservedSubject<T>) -> bool) -> Result<Self> {
        let subjects: Vec<_> = self.subjects.iter().filter(|s| keep(s)).cloned().collect();
        Self::with_names(subjects, self.p, self.q, self.names.clone())
    }

    /// Applies `x ↦ (x − center)/scale` to every Gaussian and fixed covariate.
    pub fn affine_transform(&self, center: &[T], scale: &[T]) -> Self {
        let p = self.p;
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let x_obs = s.mask.observed().iter().zip(&s.x_obs).map(|(&j, &v)| (v - center[j]) / scale[j]).collect();
                let fixed = s.fixed.iter().enumerate().map(|(k, &v)| (v - center[p + k]) / scale[p + k]).collect();
                ObservedSubject { y: s.y, delta: s.delta, mask: s.mask.clone(), x_obs, fixed }
            })
            .collect();
        Self { subjects, p, q: self.q, names: self.names.clone() }
    }

    /// Available-case means and standard deviations (1/n divisor) of all covariates.
    pub fn available_case_moments(&self) -> (Vec<T>, Vec<T>) {
        let dim = self.dim();
        let mut mean = vec![T::zero(); dim];
        let mut sd = vec![T::one(); dim];
        for j in 0..dim {
            let vals: Vec<T> = self.subjects.iter().filter_map(|s| s.value(j, self.p)).collect();
            if vals.is_empty() {
                continue;
            }
            let k = T::from_usize_lossy(vals.len());
            let m = vals.iter().copied().sum::<T>() / k;
            let v = vals.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / k;
            mean[j] = m;
            if v > T::zero() {
                sd[j] = v.sqrt();
            }
        }
        (mean, sd)
    }
}

impl<T: Real> ObservedSubject<T> {
    /// Value of covariate `j` (Gaussian block first, then fixed), if observed.
    pub fn value(&self, j: usize, p: usize) -> Option<T> {
        if j >= p {
            return self.fixed.get(j - p).copied();
        }
        if self.mask.is_missing(j) {
            return None;
        }
        let pos = self.mask.observed().partition_point(|&k| k < j);
        Some(self.x_obs[pos])
    }
}

/// Step-function baseline cumulative hazard with jumps at event times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "BaselineRepr<T>", try_from = "BaselineRepr<T>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Baseline<T> {
    times: Vec<T>,
    jumps: Vec<T>,
    cumulative: Vec<T>,
}

#[derive(Clone, Serialize, Deserialize)]
struct BaselineRepr<T> {
    times: Vec<T>,
    jumps: Vec<T>,
}

impl<T: Real> From<Baseline<T>> for BaselineRepr<T> {
    fn from(b: Baseline<T>) -> Self {
        Self { times: b.times, jumps: b.jumps }
    }
}

impl<T: Real> TryFrom<BaselineRepr<T>> for Baseline<T> {
    type Error = Error;
    fn try_from(r: BaselineRepr<T>) -> Result<Self> {
        Baseline::new(r.times, r.jumps)
    }
}

impl<T: Real> Baseline<T> {
    pub fn new(times: Vec<T>, jumps: Vec<T>) -> Result<Self> {
        if times.len() != jumps.len() {
            return Err(Error::InvalidInput("baseline times and jumps differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("baseline jump times must be strictly increasing".into()));
        }
        if jumps.iter().any(|&j| !(j > T::zero()) || !j.is_finite()) {
            return Err(Error::InvalidInput("baseline jumps must be positive and finite".into()));
        }
        let mut acc = T::zero();
        let cumulative = jumps
            .iter()
            .map(|&j| {
                acc = acc + j;
                acc
            })
            .collect();
        Ok(Self { times, jumps, cumulative })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn jumps(&self) -> &[T] {
        &self.jumps
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Λ(t) = Σ_{tⱼ ≤ t} λⱼ` (right-continuous).
    pub fn cumulative_hazard(&self, t: T) -> T {
        let k = self.times.partition_point(|&tj| tj <= t);
        if k == 0 {
            T::zero()
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Jump size at exactly `t`, if `t` is a jump time.
    pub fn jump_at(&self, t: T) -> Option<T> {
        let k = self.times.partition_point(|&tj| tj < t);
        (k < self.times.len() && self.times[k] == t).then(|| self.jumps[k])
    }
}

/// `θ = (β, Λ, μ, Σ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ParameterSet<T> {
    /// Gaussian-block coefficients followed by fixed-covariate coefficients.
    pub beta: Vec<T>,
    pub baseline: Baseline<T>,
    pub mu: Vec<T>,
    pub sigma: Matrix<T>,
}

impl<T: Real> ParameterSet<T> {
    pub fn validate(&self, data: &Dataset<T>) -> Result<()> {
        if self.beta.len() != data.dim() {
            return Err(Error::InvalidInput(format!("beta has length {}, expected {}", self.beta.len(), data.dim())));
        }
        if self.mu.len() != data.p() || self.sigma.rows() != data.p() || self.sigma.cols() != data.p() {
            return Err(Error::InvalidInput("mu/sigma dimension mismatch".into()));
        }
        if self.sigma.max_abs_diff(&self.sigma.transpose()) > T::lit(1e-10) * self.sigma.max_abs().max(T::one()) {
            return Err(Error::InvalidInput("sigma is not symmetric".into()));
        }
        if self.beta.iter().chain(&self.mu).any(|v| !v.is_finite()) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(())
    }

    /// Largest absolute difference across all parameter blocks.
    pub fn max_abs_change(&self, other: &Self) -> T {
        use crate::linalg::max_abs_diff;
        let mut m = max_abs_diff(&self.beta, &other.beta).max(max_abs_diff(&self.mu, &other.mu));
        m = m.max(self.sigma.max_abs_diff(&other.sigma));
        if self.baseline.len() == other.baseline.len() {
            m = m.max(max_abs_diff(self.baseline.jumps(), other.baseline.jumps()));
        } else {
            m = T::infinity();
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_hazard_steps() {
        let b = Baseline::new(vec![1.0_f64, 2.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(b.cumulative_hazard(0.5), 0.0);
        assert!((b.cumulative_hazard(2.0) - 0.3).abs() < 1e-15);
        assert!((b.cumulative_hazard(1e300) - 0.3).abs() < 1e-15);
        assert_eq!(b.cumulative_hazard(1.0), 0.1);
        assert_eq!(b.jump_at(2.0), Some(0.2));
        assert_eq!(b.jump_at(1.5), None);
    }

    #[test]
    fn baseline_rejects_bad_input() {
        assert!(Baseline::new(vec![2.0, 1.0], vec![0.1, 0.1]).is_err());
        assert!(Baseline::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn baseline_serde_round_trip() {
        let b = Baseline::new(vec![1.0, 2.5], vec![0.1, 0.25]).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        let back: Baseline<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn event_times_with_ties() {
        let d = Dataset::from_complete(
            &[3.0, 1.0, 3.0, 2.0],
            &[true, true, true, false],
            &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let (t, c) = d.event_times();
        assert_eq!(t, vec![1.0, 3.0]);
        assert_eq!(c, vec![1, 2]);
    }

    #[test]
    fn subject_row_round_trip() {
        let s = ObservedSubject::from_row(1.0, true, &[Some(1.0), None, Some(3.0)]);
        assert_eq!(s.mask.missing(), &[1]);
        assert_eq!(s.row(), vec![Some(1.0), None, Some(3.0)]);
        assert_eq!(s.value(2, 3), Some(3.0));
        assert_eq!(s.value(1, 3), None);
    }

    #[test]
    fn dataset_validation() {
        let bad = ObservedSubject::complete(-1.0, true, vec![0.0]);
        assert!(Dataset::new(vec![bad], 1, 0).is_err());
        let s = ObservedSubject::new(1.0, true, MissingMask::none(2), vec![1.0]);
        assert!(Dataset::new(vec![s], 2, 0).is_err());
    }
}
