//! One-dimensional adaptive Gauss–Hermite integration against the tilted
//! Gaussian density of the linear-predictor direction `X̃₁`:
//!
//! `log f(x) = δ·b·x − Λ·exp(b·x + offset) − (x − center)² / (2·variance)`
//!
//! The log-density is strictly concave, so it has a unique mode. Nodes are
//! recentered at the mode and rescaled by the curvature there, and all
//! weights are kept in log space.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::real::{log_sum_exp, Real};

pub const DEFAULT_ORDER: usize = 30;
pub const MIN_ORDER: usize = 10;

const MODE_MAX_ITER: usize = 100;
const MODE_GRAD_TOL: f64 = 1e-10;

/// The unnormalized density `f(x̃₁; 𝒪ᵢ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedDensity<T> {
    pub delta: bool,
    /// `‖β_R‖`.
    pub bnorm: T,
    /// `Λ(Yᵢ)`.
    pub cumhaz: T,
    /// `X_{−R}ᵀ β_{−R}`.
    pub offset: T,
    /// `(ηᵢ)₁`.
    pub center: T,
    /// `(νᵢ)₁,₁`.
    pub variance: T,
}

impl<T: Real> TiltedDensity<T> {
    fn delta_b(&self) -> T {
        if self.delta {
            self.bnorm
        } else {
            T::zero()
        }
    }

    #[inline]
    pub fn log_density(&self, x: T) -> T {
        let d = x - self.center;
        self.delta_b() * x - self.cumhaz * (self.bnorm * x + self.offset).exp() - d * d / (T::lit(2.0) * self.variance)
    }

    #[inline]
    pub fn grad(&self, x: T) -> T {
        self.delta_b()
            - self.cumhaz * self.bnorm * (self.bnorm * x + self.offset).exp()
            - (x - self.center) / self.variance
    }

    /// `f(x)·e^{t·x} = e^{k}·f_t(x)` with `f_t` in the same family; returns `(f_t, k)`.
    pub fn tilted(&self, t: T) -> (Self, T) {
        let shift = t * self.variance;
        (Self { center: self.center + shift, ..*self }, t * self.center + T::lit(0.5) * t * shift)
    }

    /// `−d²/dx² log f(x)`, always positive.
    #[inline]
    pub fn neg_curvature(&self, x: T) -> T {
        self.cumhaz * self.bnorm * self.bnorm * (self.bnorm * x + self.offset).exp() + T::one() / self.variance
    }

    fn validate(&self) -> Result<()> {
        let ok = self.bnorm >= T::zero()
            && self.cumhaz >= T::zero()
            && self.variance > T::zero()
            && self.bnorm.is_finite()
            && self.cumhaz.is_finite()
            && self.offset.is_finite()
            && self.center.is_finite()
            && self.variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::integration(None, format!("malformed tilted density {self:?}")))
        }
    }
}

/// Mode of `log f` and `−d²/dx² log f` there.
pub fn find_mode<T: Real>(density: &TiltedDensity<T>) -> Result<(T, T)> {
    density.validate()?;
    // Maximizer without the hazard term; the hazard term only pushes left.
    let hi0 = density.center + density.delta_b() * density.variance;
    if density.cumhaz == T::zero() || density.bnorm == T::zero() {
        return Ok((hi0, density.neg_curvature(hi0)));
    }
    let mut hi = hi0;
    let g_hi = density.grad(hi);
    if g_hi == T::zero() {
        return Ok((hi, density.neg_curvature(hi)));
    }
    let mut step = density.variance.sqrt().max(T::lit(1e-8));
    let mut lo = hi - step;
    let mut found = false;
    for _ in 0..200 {
        let g = density.grad(lo);
        if !g.is_finite() {
            break;
        }
        if g >= T::zero() {
            found = true;
            break;
        }
        hi = lo;
        step = step + step;
        lo = lo - step;
    }
    if !found {
        return Err(Error::integration(None, format!("could not bracket the mode of {density:?}")));
    }

    let tol = T::lit(MODE_GRAD_TOL);
    let mut x = hi;
    for _ in 0..MODE_MAX_ITER {
        let g = density.grad(x);
        if !g.is_finite() {
            return Err(Error::integration(None, "non-finite gradient while locating the mode"));
        }
        if g.abs() < tol {
            return Ok((x, density.neg_curvature(x)));
        }
        if g > T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        let h = density.neg_curvature(x);
        let mut next = x + g / h;
        if !(next > lo && next < hi) {
            next = (lo + hi) * T::lit(0.5);
        }
        if (next - x).abs() <= T::epsilon() * (T::one() + x.abs()) {
            // At floating-point resolution; the residual is as small as it gets.
            return Ok((next, density.neg_curvature(next)));
        }
        x = next;
    }
    let g = density.grad(x);
    if g.abs() < tol.sqrt() {
        return Ok((x, density.neg_curvature(x)));
    }
    Err(Error::integration(None, format!("mode search did not converge (|g| = {:e})", g.to_f64_lossy())))
}

/// Gauss–Hermite abscissae and log-weights for `∫ e^{−z²} h(z) dz`.
#[derive(Clone, Debug)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub log_weights: Vec<T>,
    pub order: usize,
}

type Table = Arc<(Vec<f64>, Vec<f64>)>;

fn table(order: usize) -> Table {
    static CACHE: OnceLock<Mutex<HashMap<usize, Table>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("gauss-hermite cache poisoned");
    guard.entry(order).or_insert_with(|| Arc::new(gauss_hermite_f64(order))).clone()
}

/// Newton iteration on orthonormal Hermite polynomials with the classical
/// asymptotic starting values.
fn gauss_hermite_f64(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut lw = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        let l = 2f64.ln() - 2.0 * pp.abs().ln();
        lw[i] = l;
        lw[n - 1 - i] = l;
    }
    let mut pairs: Vec<(f64, f64)> = x.into_iter().zip(lw).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

impl<T: Real> QuadratureRule<T> {
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::ContractViolation("quadrature order must be at least 1".into()));
        }
        let t = table(order);
        Ok(Self {
            nodes: t.0.iter().map(|&v| T::lit(v)).collect(),
            log_weights: t.1.iter().map(|&v| T::lit(v)).collect(),
            order,
        })
    }
}

/// Nodes placed by the adaptive rule, with log-probabilities normalized so
/// that they sum to one, plus `log ∫ f`.
#[derive(Clone, Debug)]
pub struct AdaptiveNodes<T> {
    pub x: Vec<T>,
    pub log_p: Vec<T>,
    pub log_integral: T,
}

impl<T: Real> AdaptiveNodes<T> {
    pub fn new(density: &TiltedDensity<T>, rule: &QuadratureRule<T>) -> Result<Self> {
        let (mode, curv) = find_mode(density)?;
        let scale = T::lit(std::f64::consts::SQRT_2) / curv.sqrt();
        let log_scale = scale.ln();
        let mut x = Vec::with_capacity(rule.order);
        let mut lw = Vec::with_capacity(rule.order);
        for (&z, &w) in rule.nodes.iter().zip(&rule.log_weights) {
            let xi = mode + scale * z;
            x.push(xi);
            lw.push(w + z * z + log_scale + density.log_density(xi));
        }
        let log_integral = log_sum_exp(&lw);
        if !log_integral.is_finite() {
            return Err(Error::integration(None, format!("non-finite normalizer for {density:?}")));
        }
        for l in &mut lw {
            *l = *l - log_integral;
        }
        Ok(Self { x, log_p: lw, log_integral })
    }

    /// Nodes adapted to `f·e^{t·x}` together with `log E_f[e^{tX}]`, where
    /// `self` holds the nodes of `f`.
    pub fn retilted(&self, density: &TiltedDensity<T>, rule: &QuadratureRule<T>, t: T) -> Result<(Self, T)> {
        let (tilted, log_k) = density.tilted(t);
        let nodes = Self::new(&tilted, rule)?;
        let lm = log_k + nodes.log_integral - self.log_integral;
        Ok((nodes, lm))
    }

    /// A single node carrying all the mass.
    pub fn point_mass(at: T) -> Self {
        Self { x: vec![at], log_p: vec![T::zero()], log_integral: T::zero() }
    }

    pub fn expect(&self, h: impl Fn(T) -> T) -> T {
        self.x.iter().zip(&self.log_p).map(|(&x, &lp)| lp.exp() * h(x)).sum()
    }

    /// `log E[exp(t·X)]`.
    pub fn log_mgf(&self, t: T) -> T {
        if t == T::zero() {
            return T::zero();
        }
        let terms: Vec<T> = self.x.iter().zip(&self.log_p).map(|(&x, &lp)| lp + t * x).collect();
        log_sum_exp(&terms)
    }

    /// `(log E[e^{tX}], E[e^{tX} X]/E[e^{tX}], E[e^{tX} X²]/E[e^{tX}])`.
    pub fn tilted_moments(&self, t: T) -> (T, T, T) {
        let terms: Vec<T> = self.x.iter().zip(&self.log_p).map(|(&x, &lp)| lp + t * x).collect();
        let lm = if t == T::zero() { T::zero() } else { log_sum_exp(&terms) };
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for (&x, &l) in self.x.iter().zip(&terms) {
            let q = (l - lm).exp();
            m1 = m1 + q * x;
            m2 = m2 + q * x * x;
        }
        (lm, m1, m2)
    }
}

/// `E{h(X̃₁) | 𝒪ᵢ} = ∫ h f / ∫ f` for vector-valued `h`, each component
/// accumulated in sign-tracked log space.
pub fn agh_expect<T: Real>(
    h: impl Fn(T) -> Vec<T>,
    density: &TiltedDensity<T>,
    rule: &QuadratureRule<T>,
) -> Result<Vec<T>> {
    if rule.order < MIN_ORDER {
        return Err(Error::ContractViolation(format!(
            "adaptive quadrature needs at least {MIN_ORDER} nodes, got {}",
            rule.order
        )));
    }
    let nodes = AdaptiveNodes::new(density, rule)?;
    let values: Vec<Vec<T>> = nodes.x.iter().map(|&x| h(x)).collect();
    let k = values.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (v, &lp) in values.iter().zip(&nodes.log_p) {
            let hv = v[c];
            if !hv.is_finite() {
                return Err(Error::integration(None, "integrand is not finite at a quadrature node"));
            }
            if hv > T::zero() {
                pos.push(lp + hv.ln());
            } else if hv < T::zero() {
                neg.push(lp + (-hv).ln());
            }
        }
        let value = log_sum_exp(&pos).exp() - log_sum_exp(&neg).exp();
        if !value.is_finite() {
            return Err(Error::integration(None, "non-finite numerator"));
        }
        out.push(value);
    }
    Ok(out)
}

pub fn agh_expect_scalar<T: Real>(
    h: impl Fn(T) -> T,
    density: &TiltedDensity<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    Ok(agh_expect(|x| vec![h(x)], density, rule)?[0])
}
