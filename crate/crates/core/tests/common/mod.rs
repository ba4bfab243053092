//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use npcox::em_fit::nelson_aalen;
use npcox::estep::SubjectExpectations;
use npcox::{Baseline, Dataset, Matrix, MissingMask, ObservedSubject, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Physicists' Gauss–Hermite nodes and weights by Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Dense inverse by Gauss–Jordan with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        for v in m[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn cholesky_lower(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Random SPD matrix with eigenvalues roughly in `[lo, lo + spread]`.
pub fn random_spd(rng: &mut impl Rng, p: usize, lo: f64, spread: f64) -> Vec<Vec<f64>> {
    let g: Vec<Vec<f64>> = (0..p).map(|_| (0..p).map(|_| normal(rng)).collect()).collect();
    let mut a = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..p {
            let s: f64 = (0..p).map(|k| g[i][k] * g[j][k]).sum();
            a[i][j] = spread * s / (2.0 * p as f64) + if i == j { lo } else { 0.0 };
        }
    }
    a
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows)
}

/// One subject together with the parameters its expectations are taken under.
#[derive(Clone, Debug)]
pub struct Case {
    pub subject: ObservedSubject<f64>,
    pub params: ParameterSet<f64>,
    pub beta_new: Vec<f64>,
}

/// A subject with `n_missing` missing Gaussian covariates under random valid parameters.
pub fn random_case(rng: &mut impl Rng, p: usize, n_missing: usize) -> Case {
    let sigma = random_spd(rng, p, 0.3, 1.2);
    let mu: Vec<f64> = (0..p).map(|_| 0.5 * normal(rng)).collect();
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-0.8..0.8)).collect();
    let beta_new: Vec<f64> = beta.iter().map(|b| b + rng.random_range(-0.3..0.3)).collect();
    let l = cholesky_lower(&sigma);
    let z: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
    let x: Vec<f64> = (0..p).map(|i| mu[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let missing = &order[..n_missing];
    let mask = MissingMask::from_missing(p, missing);
    let x_obs = mask.observed().iter().map(|&j| x[j]).collect();
    let y = rng.random_range(0.5..3.0);
    let cumhaz = rng.random_range(0.05..1.5);
    let delta = rng.random_bool(0.5);
    let baseline = Baseline::new(vec![y], vec![cumhaz]).unwrap();
    Case {
        subject: ObservedSubject::new(y, delta, mask, x_obs),
        params: ParameterSet { beta, baseline, mu, sigma: matrix(&sigma) },
        beta_new,
    }
}

/// `N(m, V)` law of the missing block given the observed one, from the precision form.
pub fn conditional_law(case: &Case) -> (Vec<f64>, Vec<Vec<f64>>) {
    let s = &case.subject;
    let sigma = case.params.sigma.to_rows();
    let prec = inverse(&sigma);
    let mis = s.mask.missing();
    let obs = s.mask.observed();
    let k_mm: Vec<Vec<f64>> = mis.iter().map(|&a| mis.iter().map(|&b| prec[a][b]).collect()).collect();
    let v = inverse(&k_mm);
    let mu = &case.params.mu;
    let shift: Vec<f64> =
        mis.iter().map(|&a| obs.iter().zip(&s.x_obs).map(|(&o, &xo)| prec[a][o] * (xo - mu[o])).sum()).collect();
    let m = (0..mis.len()).map(|i| mu[mis[i]] - (0..mis.len()).map(|k| v[i][k] * shift[k]).sum::<f64>()).collect();
    (m, v)
}

/// The five expectation blocks and the risk expectation at `beta_new`, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks {
    pub ex: Vec<f64>,
    pub exx: Vec<f64>,
    pub erisk: Vec<f64>,
    pub erisk_x: Vec<f64>,
    pub erisk_xx: Vec<f64>,
    pub erisk_new: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 6] = ["E[X]", "E[XX']", "E[e^bX]", "E[e^bX X]", "E[e^bX XX']", "E_k[e^b'X]"];

impl Blocks {
    pub fn from_expectations(e: &SubjectExpectations<f64>, erisk_new: f64) -> Self {
        Self {
            ex: e.ex.clone(),
            exx: e.exx.as_slice().to_vec(),
            erisk: vec![e.erisk],
            erisk_x: e.erisk_x.clone(),
            erisk_xx: e.erisk_xx.as_slice().to_vec(),
            erisk_new: vec![erisk_new],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 6] {
        [&self.ex, &self.exx, &self.erisk, &self.erisk_x, &self.erisk_xx, &self.erisk_new]
    }
}

fn full_vector(case: &Case, x_mis: &[f64]) -> Vec<f64> {
    let s = &case.subject;
    let mut x = vec![0.0; s.mask.p()];
    for (&j, &v) in s.mask.observed().iter().zip(&s.x_obs) {
        x[j] = v;
    }
    for (&j, &v) in s.mask.missing().iter().zip(x_mis) {
        x[j] = v;
    }
    x
}

fn log_kernel(case: &Case, eta: f64) -> f64 {
    let cumhaz = case.params.baseline.cumulative_hazard(case.subject.y);
    let d = if case.subject.delta { eta } else { 0.0 };
    d - cumhaz * eta.exp()
}

/// Weighted accumulator of all block integrands.
struct Acc {
    w: f64,
    sums: Vec<f64>,
    sq: Vec<f64>,
    cross: Vec<f64>,
    w2: f64,
}

fn integrands(case: &Case, x: &[f64]) -> Vec<f64> {
    let p = x.len();
    let e = x.iter().zip(&case.params.beta).map(|(a, b)| a * b).sum::<f64>().exp();
    let e_new = x.iter().zip(&case.beta_new).map(|(a, b)| a * b).sum::<f64>().exp();
    let mut v = Vec::with_capacity(2 * p + 2 * p * p + 2);
    v.extend_from_slice(x);
    for a in 0..p {
        for b in 0..p {
            v.push(x[a] * x[b]);
        }
    }
    v.push(e);
    v.extend(x.iter().map(|&a| e * a));
    for a in 0..p {
        for b in 0..p {
            v.push(e * x[a] * x[b]);
        }
    }
    v.push(e_new);
    v
}

fn split(p: usize, v: &[f64]) -> Blocks {
    let (ex, rest) = v.split_at(p);
    let (exx, rest) = rest.split_at(p * p);
    let (erisk, rest) = rest.split_at(1);
    let (erisk_x, rest) = rest.split_at(p);
    let (erisk_xx, erisk_new) = rest.split_at(p * p);
    Blocks {
        ex: ex.to_vec(),
        exx: exx.to_vec(),
        erisk: erisk.to_vec(),
        erisk_x: erisk_x.to_vec(),
        erisk_xx: erisk_xx.to_vec(),
        erisk_new: erisk_new.to_vec(),
    }
}

/// Tensor-product Gauss–Hermite over the conditional Gaussian of the missing block.
pub fn tensor_oracle(case: &Case, order: usize) -> Blocks {
    let (x_gh, w_gh) = gauss_hermite(order);
    let (m, v) = conditional_law(case);
    let l = cholesky_lower(&v);
    let r = m.len();
    let p = case.subject.mask.p();
    let mut idx = vec![0usize; r];
    let mut nodes = Vec::new();
    loop {
        let z: Vec<f64> = idx.iter().map(|&k| std::f64::consts::SQRT_2 * x_gh[k]).collect();
        let x_mis: Vec<f64> = (0..r).map(|i| m[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()).collect();
        let x = full_vector(case, &x_mis);
        let eta: f64 = x.iter().zip(&case.params.beta).map(|(a, b)| a * b).sum();
        let logw: f64 = idx.iter().map(|&k| w_gh[k].ln()).sum::<f64>() + log_kernel(case, eta);
        nodes.push((logw, x));
        let mut d = 0;
        while d < r {
            idx[d] += 1;
            if idx[d] < order {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == r {
            break;
        }
    }
    let top = nodes.iter().map(|n| n.0).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut sums: Vec<f64> = Vec::new();
    for (logw, x) in &nodes {
        let w = (logw - top).exp();
        let h = integrands(case, x);
        if sums.is_empty() {
            sums = vec![0.0; h.len()];
        }
        total += w;
        for (s, v) in sums.iter_mut().zip(&h) {
            *s += w * v;
        }
    }
    split(p, &sums.iter().map(|s| s / total).collect::<Vec<_>>())
}

/// Self-normalized importance sampling from the conditional Gaussian.
/// Returns the estimates and their delta-method standard errors.
pub fn monte_carlo(case: &Case, draws: usize, rng: &mut impl Rng) -> (Blocks, Blocks) {
    let (m, v) = conditional_law(case);
    let l = cholesky_lower(&v);
    let r = m.len();
    let p = case.subject.mask.p();
    let len = integrands(case, &vec![0.0; p]).len();
    let mut acc = Acc { w: 0.0, sums: vec![0.0; len], sq: vec![0.0; len], cross: vec![0.0; len], w2: 0.0 };
    let mut z = vec![0.0; r];
    let mut x_mis = vec![0.0; r];
    for _ in 0..draws {
        for zi in z.iter_mut() {
            *zi = normal(rng);
        }
        for i in 0..r {
            x_mis[i] = m[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>();
        }
        let x = full_vector(case, &x_mis);
        let eta: f64 = x.iter().zip(&case.params.beta).map(|(a, b)| a * b).sum();
        let w = log_kernel(case, eta).exp();
        let h = integrands(case, &x);
        acc.w += w;
        acc.w2 += w * w;
        for k in 0..len {
            let wh = w * h[k];
            acc.sums[k] += wh;
            acc.cross[k] += w * wh;
            acc.sq[k] += wh * wh;
        }
    }
    let est: Vec<f64> = acc.sums.iter().map(|s| s / acc.w).collect();
    let se: Vec<f64> = (0..len)
        .map(|k| {
            let e = est[k];
            let num = acc.sq[k] - 2.0 * e * acc.cross[k] + e * e * acc.w2;
            num.max(0.0).sqrt() / acc.w
        })
        .collect();
    (split(p, &est), split(p, &se))
}

/// Largest block-scaled error: `max |a − b| / max(max|b|, floor)` per block.
pub fn block_rel_err(lib: &Blocks, oracle: &Blocks) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (k, (a, b)) in lib.blocks().iter().zip(oracle.blocks()).enumerate() {
        let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        out[k] = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale;
    }
    out
}

/// Solves `min ½βᵀAβ + Pᵀβ + γ‖β‖₁` by accelerated proximal gradient.
pub fn lasso_reference(a: &[Vec<f64>], p: &[f64], gamma: f64) -> Vec<f64> {
    let n = p.len();
    // Lipschitz bound by power iteration
    let mut v = vec![1.0; n];
    let mut lip = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        lip = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = av.iter().map(|x| x / norm).collect();
    }
    let step = 1.0 / (1.01 * lip);
    let shrink = |x: f64, t: f64| x.signum() * (x.abs() - t).max(0.0);
    let mut b = vec![0.0; n];
    let mut yk = b.clone();
    let mut t = 1.0_f64;
    for _ in 0..2_000_000 {
        let grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * yk[j]).sum::<f64>() + p[i]).collect();
        let next: Vec<f64> = (0..n).map(|i| shrink(yk[i] - step * grad[i], step * gamma)).collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let change = next.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        yk = (0..n).map(|i| next[i] + (t - 1.0) / t_next * (next[i] - b[i])).collect();
        b = next;
        t = t_next;
        if change < 1e-15 {
            break;
        }
    }
    b
}

/// Profiled `Q(β)` with expectations frozen at `params_k`, each risk
/// expectation integrated by the tensor oracle.
pub fn q_oracle(
    subjects: &[ObservedSubject<f64>],
    params_k: &ParameterSet<f64>,
    ex: &[Vec<f64>],
    beta: &[f64],
    order: usize,
) -> f64 {
    let erisk: Vec<f64> = subjects
        .iter()
        .map(|s| {
            let case = Case { subject: s.clone(), params: params_k.clone(), beta_new: beta.to_vec() };
            if s.mask.is_complete() {
                s.x_obs.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>().exp()
            } else {
                tensor_oracle(&case, order).erisk_new[0]
            }
        })
        .collect();
    let mut q = 0.0;
    for (i, s) in subjects.iter().enumerate() {
        if !s.delta {
            continue;
        }
        let risk: f64 = subjects.iter().zip(&erisk).filter(|(t, _)| t.y >= s.y).map(|(_, e)| e).sum();
        q += ex[i].iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() - risk.ln();
    }
    q
}

/// Small dataset with up to two missing covariates per subject and random parameters.
pub fn random_problem(seed: u64, n: usize, p: usize) -> (Dataset<f64>, ParameterSet<f64>) {
    let mut r = rng(seed);
    let sigma = random_spd(&mut r, p, 0.4, 1.0);
    let l = cholesky_lower(&sigma);
    let beta: Vec<f64> = (0..p).map(|_| r.random_range(-0.8..0.8)).collect();
    let mu: Vec<f64> = (0..p).map(|_| 0.3 * normal(&mut r)).collect();
    let subjects: Vec<ObservedSubject<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| normal(&mut r)).collect();
            let x: Vec<f64> = (0..p).map(|i| mu[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()).collect();
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let t = r.random_range(0.0..1.0_f64).ln().abs() / (0.5 * eta.exp());
            let c = r.random_range(0.2..4.0);
            let n_mis = r.random_range(0..=2.min(p - 1));
            let mut idx: Vec<usize> = (0..p).collect();
            for i in (1..p).rev() {
                idx.swap(i, r.random_range(0..=i));
            }
            let mask = MissingMask::from_missing(p, &idx[..n_mis]);
            let x_obs = mask.observed().iter().map(|&j| x[j]).collect();
            ObservedSubject::new(t.min(c) + 1e-9, t <= c, mask, x_obs)
        })
        .collect();
    let data = Dataset::new(subjects, p, 0).unwrap();
    let params = ParameterSet { beta, baseline: nelson_aalen(&data).unwrap(), mu, sigma: matrix(&sigma) };
    (data, params)
}
