//! Simulation designs, data generation, evaluation metrics and the replicate
//! driver for the benchmark tables.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::baselines::{complete_case, cox_fit, cox_lasso_path, single_impute, CompleteDataset, CoxConfig, CoxFit};
use crate::bootstrap_infer::bootstrap;
use crate::config::with_workers;
use crate::data::{Baseline, Dataset, ObservedSubject};
use crate::em_fit::{fit_npmle, FitConfig};
use crate::error::{Error, Result};
use crate::gaussian::MissingMask;
use crate::lasso_path::{tune_path, LassoConfig};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Identity,
    /// `ρ^{|i−j|}`.
    Ar {
        rho: f64,
    },
    /// Block-diagonal, block `k` of size `sizes[k]` with `rhos[k]^{|i−j|}`.
    BlockAr {
        sizes: Vec<usize>,
        rhos: Vec<f64>,
    },
}

impl CovarianceSpec {
    pub fn matrix(&self, p: usize) -> Result<Matrix<f64>> {
        match self {
            Self::Identity => Ok(Matrix::identity(p)),
            Self::Ar { rho } => Ok(Matrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))),
            Self::BlockAr { sizes, rhos } => {
                if sizes.len() != rhos.len() || sizes.iter().sum::<usize>() != p {
                    return Err(Error::Design("block sizes must match rhos and sum to p".into()));
                }
                let mut m = Matrix::zeros(p, p);
                let mut start = 0;
                for (&size, &rho) in sizes.iter().zip(rhos) {
                    for i in 0..size {
                        for j in 0..size {
                            m[(start + i, start + j)] = rho.powi(i.abs_diff(j) as i32);
                        }
                    }
                    start += size;
                }
                Ok(m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    Mcar,
    /// A fully observed random subcohort, then events, then non-events.
    MarCaseCohort {
        subcohort: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Marginal {
    Normal,
    /// Each standardized coordinate mapped through `F_df⁻¹ ∘ Φ`.
    StudentT {
        df: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub name: String,
    pub n: usize,
    pub p: usize,
    /// Empty means zero.
    #[serde(default)]
    pub mu: Vec<f64>,
    pub covariance: CovarianceSpec,
    pub beta: Vec<f64>,
    /// `Λ(t) = hazard_scale · t^hazard_shape`.
    pub hazard_scale: f64,
    pub hazard_shape: f64,
    /// Rate of the exponential censoring time; zero means administrative only.
    pub censor_rate: f64,
    pub censor_cap: f64,
    pub mechanism: Mechanism,
    pub missing_fraction: f64,
    /// Zero-based coordinates masked together for subjects with missing data.
    pub missing_coords: Vec<usize>,
    pub marginal: Marginal,
    pub seed: u64,
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Design(format!("{}: {m}", self.name)));
        if self.n < 2 || self.p == 0 {
            return bad("need n ≥ 2 and p ≥ 1");
        }
        if self.beta.len() != self.p {
            return bad("beta length must equal p");
        }
        if !self.mu.is_empty() && self.mu.len() != self.p {
            return bad("mu length must equal p");
        }
        if !(self.hazard_scale > 0.0 && self.hazard_shape > 0.0) {
            return bad("baseline hazard parameters must be positive");
        }
        if !(self.censor_rate >= 0.0 && self.censor_cap > 0.0) {
            return bad("censoring rate must be nonnegative and the cap positive");
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("missing fraction must lie in [0, 1)");
        }
        if self.missing_coords.iter().any(|&j| j >= self.p) {
            return bad("missing coordinate out of range");
        }
        if let Mechanism::MarCaseCohort { subcohort } = self.mechanism {
            if !(0.0..=1.0).contains(&subcohort) {
                return bad("subcohort fraction must lie in [0, 1]");
            }
        }
        if let Marginal::StudentT { df } = self.marginal {
            if !(df > 0.0) {
                return bad("t degrees of freedom must be positive");
            }
        }
        let sigma = self.covariance.matrix(self.p)?;
        if sigma.cholesky().is_none() {
            return bad("covariance is not positive definite");
        }
        Ok(())
    }

    pub fn mu_vec(&self) -> Vec<f64> {
        if self.mu.is_empty() {
            vec![0.0; self.p]
        } else {
            self.mu.clone()
        }
    }

    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        self.hazard_scale * t.powf(self.hazard_shape)
    }

    /// Event time solving `Λ(T)·e^{η} = e`.
    pub fn event_time(&self, eta: f64, e: f64) -> f64 {
        (e / (self.hazard_scale * eta.exp())).powf(1.0 / self.hazard_shape)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let d: Self = toml::from_str(text).map_err(|e| Error::Design(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("design serializes")
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_missing_fraction(mut self, p_m: f64) -> Self {
        self.missing_fraction = p_m;
        self
    }
}

const SUBCOHORT: f64 = 0.3;

fn low_dim(name: &str, n: usize, p_m: f64, mechanism: Mechanism, marginal: Marginal) -> SimDesign {
    SimDesign {
        name: name.into(),
        n,
        p: 4,
        mu: vec![0.0; 4],
        covariance: CovarianceSpec::Ar { rho: 0.5 },
        beta: vec![0.5; 4],
        hazard_scale: 0.04,
        hazard_shape: 1.25,
        censor_rate: 0.03,
        censor_cap: 50.0,
        mechanism,
        missing_fraction: p_m,
        missing_coords: vec![0, 1],
        marginal,
        seed: 20240101,
    }
}

fn high_dim(name: &str, n: usize, p_m: f64, mechanism: Mechanism, marginal: Marginal) -> SimDesign {
    let mut beta = vec![0.0; 100];
    for j in (0..4).chain(96..100) {
        beta[j] = 0.25;
    }
    SimDesign {
        name: name.into(),
        n,
        p: 100,
        mu: vec![0.0; 100],
        covariance: CovarianceSpec::BlockAr { sizes: vec![50, 50], rhos: vec![0.2, 0.5] },
        beta,
        hazard_scale: 0.04,
        hazard_shape: 1.25,
        censor_rate: 0.035,
        censor_cap: 50.0,
        mechanism,
        missing_fraction: p_m,
        // first, third, … coordinate
        missing_coords: (0..100).step_by(2).collect(),
        marginal,
        seed: 20240101,
    }
}

/// Four correlated covariates, first two missing, MCAR.
pub fn table1(n: usize, p_m: f64) -> SimDesign {
    low_dim("table1", n, p_m, Mechanism::Mcar, Marginal::Normal)
}

/// As [`table1`] with case-cohort MAR missingness.
pub fn table2(n: usize, p_m: f64) -> SimDesign {
    low_dim("table2", n, p_m, Mechanism::MarCaseCohort { subcohort: SUBCOHORT }, Marginal::Normal)
}

/// One hundred covariates with eight nonzero effects; half the coordinates missing together.
pub fn table3(n: usize, p_m: f64, mar: bool) -> SimDesign {
    let mech = if mar { Mechanism::MarCaseCohort { subcohort: SUBCOHORT } } else { Mechanism::Mcar };
    high_dim("table3", n, p_m, mech, Marginal::Normal)
}

/// [`table1`] with t₅ marginals.
pub fn table4(n: usize, p_m: f64) -> SimDesign {
    low_dim("table4", n, p_m, Mechanism::Mcar, Marginal::StudentT { df: 5.0 })
}

/// Built-in design by name with the reference settings of each table.
pub fn builtin(name: &str) -> Result<SimDesign> {
    match name {
        "table1" => Ok(table1(500, 0.2)),
        "table2" => Ok(table2(500, 0.4)),
        "table3" => Ok(table3(1000, 0.2, false)),
        "table3-mar" => Ok(table3(1000, 0.2, true).renamed("table3-mar")),
        "table4" => Ok(table4(500, 0.2)),
        "table5" => Ok(high_dim("table5", 1000, 0.2, Mechanism::Mcar, Marginal::StudentT { df: 5.0 })),
        _ => Err(Error::Design(format!("unknown design {name:?}"))),
    }
}

pub const BUILTIN_DESIGNS: [&str; 6] = ["table1", "table2", "table3", "table3-mar", "table4", "table5"];

impl SimDesign {
    fn renamed(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }
}

/// A generated dataset with the complete covariates kept for reference.
#[derive(Clone, Debug)]
pub struct SimData {
    pub data: Dataset<f64>,
    pub x_full: Vec<Vec<f64>>,
    pub subcohort: Vec<bool>,
    /// `−log U` used for each event time.
    pub exp_draws: Vec<f64>,
}

impl SimData {
    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.data.n_events() as f64 / self.data.n() as f64
    }

    pub fn missing_share(&self) -> f64 {
        self.data.subjects().iter().filter(|s| !s.mask.is_complete()).count() as f64 / self.data.n() as f64
    }
}

pub fn gen_dataset(design: &SimDesign, seed: u64) -> Result<SimData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_dataset_with(design, &mut rng)
}

pub fn gen_dataset_with<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SimData> {
    design.validate()?;
    let (n, p) = (design.n, design.p);
    let mu = design.mu_vec();
    let sigma = design.covariance.matrix(p)?;
    let chol = sigma.cholesky().ok_or_else(|| Error::Design("covariance is not positive definite".into()))?;
    let l = chol.factor();
    let std_normal = Normal::standard();
    let t_dist = match design.marginal {
        Marginal::StudentT { df } => Some(StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Design(e.to_string()))?),
        Marginal::Normal => None,
    };
    let mut x_full = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let mut x: Vec<f64> = (0..p).map(|i| (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>()).collect();
        if let Some(t) = &t_dist {
            for (j, v) in x.iter_mut().enumerate() {
                let sd = sigma[(j, j)].sqrt();
                *v = t.inverse_cdf(std_normal.cdf(*v / sd)) * sd;
            }
        }
        for (v, m) in x.iter_mut().zip(&mu) {
            *v += m;
        }
        x_full.push(x);
    }
    let mut exp_draws = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let censor = if design.censor_rate > 0.0 {
        Some(Exp::new(design.censor_rate).map_err(|e| Error::Design(e.to_string()))?)
    } else {
        None
    };
    for x in &x_full {
        let eta: f64 = x.iter().zip(&design.beta).map(|(a, b)| a * b).sum();
        let u: f64 = Open01.sample(rng);
        let e = -u.ln();
        let t = design.event_time(eta, e);
        let c = censor.map_or(design.censor_cap, |d| d.sample(rng).min(design.censor_cap));
        exp_draws.push(e);
        y.push(t.min(c));
        delta.push(t <= c);
    }

    let n_missing = (design.missing_fraction * n as f64).round() as usize;
    let mut missing = vec![false; n];
    let mut subcohort = vec![false; n];
    if !design.missing_coords.is_empty() && n_missing > 0 {
        match design.mechanism {
            Mechanism::Mcar => {
                for i in rand::seq::index::sample(rng, n, n_missing) {
                    missing[i] = true;
                }
            }
            Mechanism::MarCaseCohort { subcohort: frac } => {
                let n_sub = (frac * n as f64).round() as usize;
                let n_obs = n - n_missing;
                if n_sub > n_obs {
                    return Err(Error::Design(format!(
                        "{}: a subcohort of {n_sub} exceeds the {n_obs} observed subjects implied by the missing fraction",
                        design.name
                    )));
                }
                for i in rand::seq::index::sample(rng, n, n_sub) {
                    subcohort[i] = true;
                }
                let mut slots = n_obs - n_sub;
                let events: Vec<usize> = (0..n).filter(|&i| !subcohort[i] && delta[i]).collect();
                let others: Vec<usize> = (0..n).filter(|&i| !subcohort[i] && !delta[i]).collect();
                let mut observed = subcohort.clone();
                let take = slots.min(events.len());
                for k in rand::seq::index::sample(rng, events.len(), take) {
                    observed[events[k]] = true;
                }
                slots -= take;
                for k in rand::seq::index::sample(rng, others.len(), slots) {
                    observed[others[k]] = true;
                }
                for i in 0..n {
                    missing[i] = !observed[i];
                }
            }
        }
    }
    let subjects = (0..n)
        .map(|i| {
            if missing[i] {
                let mask = MissingMask::from_missing(p, &design.missing_coords);
                let x_obs = mask.observed().iter().map(|&j| x_full[i][j]).collect();
                ObservedSubject::new(y[i], delta[i], mask, x_obs)
            } else {
                ObservedSubject::complete(y[i], delta[i], x_full[i].clone())
            }
        })
        .collect();
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    Ok(SimData { data: Dataset::with_names(subjects, p, 0, names)?, x_full, subcohort, exp_draws })
}

/// `(TPR, FDR, MSE)`; an empty true support counts as fully recovered.
pub fn selection_metrics(beta_hat: &[f64], beta_true: &[f64]) -> Result<(f64, f64, f64)> {
    if beta_hat.len() != beta_true.len() {
        return Err(Error::InvalidInput("coefficient vectors differ in length".into()));
    }
    let (mut tp, mut fp, mut support) = (0usize, 0usize, 0usize);
    let mut mse = 0.0;
    for (&b, &t) in beta_hat.iter().zip(beta_true) {
        let sel = b != 0.0;
        let truth = t != 0.0;
        support += truth as usize;
        tp += (sel && truth) as usize;
        fp += (sel && !truth) as usize;
        mse += (b - t).powi(2);
    }
    let tpr = if support == 0 { 1.0 } else { tp as f64 / support as f64 };
    let fdr = fp as f64 / (tp + fp).max(1) as f64;
    Ok((tpr, fdr, mse))
}

/// Harrell's concordance between risk scores and observed times.
pub fn c_index(scores: &[f64], y: &[f64], delta: &[bool]) -> Result<f64> {
    if scores.len() != y.len() || y.len() != delta.len() {
        return Err(Error::InvalidInput("scores, times and statuses differ in length".into()));
    }
    let n = y.len();
    let (mut usable, mut concordant) = (0u64, 0u64);
    for i in 0..n {
        if !delta[i] {
            continue;
        }
        for j in 0..n {
            if y[i] < y[j] {
                usable += 2;
                concordant += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    if usable == 0 {
        return Err(Error::InvalidInput("no comparable pairs".into()));
    }
    Ok(concordant as f64 / usable as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Npmle,
    PenalizedNpmle,
    CompleteCase,
    SingleImputation,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Npmle => "npmle",
            Self::PenalizedNpmle => "penalized-npmle",
            Self::CompleteCase => "complete-case",
            Self::SingleImputation => "single-imputation",
        }
    }

    fn column(self) -> &'static str {
        match self {
            Self::Npmle => "npmle",
            Self::PenalizedNpmle => "penalized_npmle",
            Self::CompleteCase => "complete_case",
            Self::SingleImputation => "single_imputation",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "npmle" => Ok(Self::Npmle),
            "penalized-npmle" => Ok(Self::PenalizedNpmle),
            "complete-case" => Ok(Self::CompleteCase),
            "single-imputation" => Ok(Self::SingleImputation),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub replicates: usize,
    /// Master seed; the design's seed when absent.
    pub seed: Option<u64>,
    /// Bootstrap replicates per simulation replicate for NPMLE (0 = none).
    pub bootstrap: usize,
    /// Only the first this-many simulation replicates are bootstrapped.
    pub bootstrap_limit: Option<usize>,
    pub ci_level: f64,
    pub fit: FitConfig,
    pub lasso: LassoConfig,
    pub cox: CoxConfig,
    /// Times at which the mean estimated Λ is reported.
    pub lambda_grid: Vec<f64>,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Npmle, Method::CompleteCase, Method::SingleImputation],
            replicates: 200,
            seed: None,
            bootstrap: 0,
            bootstrap_limit: None,
            ci_level: 0.95,
            fit: FitConfig::default(),
            lasso: LassoConfig::default(),
            cox: CoxConfig::default(),
            lambda_grid: (1..=8).map(|k| 5.0 * k as f64).collect(),
            workers: None,
        }
    }
}

impl BenchConfig {
    pub fn penalized(&self) -> bool {
        self.methods.contains(&Method::PenalizedNpmle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidInput("at least one replicate is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods requested".into()));
        }
        if self.bootstrap == 1 {
            return Err(Error::InvalidInput("the bootstrap needs at least two replicates".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidInput("confidence level must lie in (0, 1)".into()));
        }
        self.fit.validate()?;
        self.lasso.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: Option<Method>,
    pub beta: Option<Vec<f64>>,
    /// Estimated Λ on the report grid.
    pub lambda: Option<Vec<f64>>,
    pub active: Option<Vec<usize>>,
    pub iterations: Option<usize>,
    /// Largest observed log-likelihood drop over all EM runs of this fit.
    pub max_descent: Option<f64>,
    pub se: Option<Vec<f64>>,
    pub ci_lower: Option<Vec<f64>>,
    pub ci_upper: Option<Vec<f64>>,
    pub bootstrap_failed: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub censoring_rate: f64,
    pub missing_share: f64,
    pub estimates: Vec<MethodEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub index: usize,
    pub truth: f64,
    pub bias: f64,
    pub se: f64,
    pub see: Option<f64>,
    pub cp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub coefficients: Vec<CoefSummary>,
    pub tpr: f64,
    pub fdr: f64,
    pub mse: f64,
    pub lambda_mean: Vec<f64>,
    pub max_descent: Option<f64>,
    pub n_bootstrapped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub design: SimDesign,
    pub seed: u64,
    pub n_replicates: usize,
    pub methods: Vec<Method>,
    pub bootstrap: usize,
    pub lambda_grid: Vec<f64>,
    pub lambda_true: Vec<f64>,
    pub summaries: Vec<MethodSummary>,
    pub replicates: Vec<ReplicateRecord>,
    /// Excluded from serialized output so reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ReplicateReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Successful estimates of `method`, in replicate order.
    pub fn estimates(&self, method: Method) -> impl Iterator<Item = (usize, &MethodEstimate)> {
        self.replicates.iter().filter_map(move |r| {
            r.estimates.iter().find(|e| e.method == Some(method) && e.beta.is_some()).map(|e| (r.index, e))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// CSV with one row per setting and coefficient, methods side by side.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let setting = format!("n={} p_M={}", self.design.n, self.design.missing_fraction);
        let mech = match self.design.mechanism {
            Mechanism::Mcar => "MCAR",
            Mechanism::MarCaseCohort { .. } => "MAR",
        };
        if self.methods.contains(&Method::PenalizedNpmle) {
            out.push_str("n,pattern,p_m,method,tpr,fdr,mse,n_ok,n_failed\n");
            for s in &self.summaries {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.4},{:.4},{:.4},{},{}",
                    self.design.n,
                    mech,
                    self.design.missing_fraction,
                    s.method.name(),
                    s.tpr,
                    s.fdr,
                    s.mse,
                    s.n_ok,
                    s.n_failed
                );
            }
            return out;
        }
        let mut header = vec!["setting".to_string(), "parameter".to_string()];
        for s in &self.summaries {
            let c = s.method.column();
            header.push(format!("{c}_bias"));
            header.push(format!("{c}_se"));
            if s.method == Method::Npmle && s.n_bootstrapped > 0 {
                header.push(format!("{c}_see"));
                header.push(format!("{c}_cp"));
            }
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for j in 0..self.design.p {
            let mut row = vec![format!("{setting} {mech}"), format!("beta{}", j + 1)];
            for s in &self.summaries {
                let c = s.coefficients.get(j);
                row.push(c.map_or(String::new(), |c| format!("{:.4}", c.bias)));
                row.push(c.map_or(String::new(), |c| format!("{:.4}", c.se)));
                if s.method == Method::Npmle && s.n_bootstrapped > 0 {
                    row.push(c.and_then(|c| c.see).map_or(String::new(), |v| format!("{v:.4}")));
                    row.push(c.and_then(|c| c.cp).map_or(String::new(), |v| format!("{v:.2}")));
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Whitespace-separated columns: t, true Λ, then the mean Λ̂ per method.
    pub fn lambda_dat(&self) -> String {
        let mut out = String::from("# t true");
        for s in &self.summaries {
            out.push(' ');
            out.push_str(s.method.name());
        }
        out.push('\n');
        for (k, t) in self.lambda_grid.iter().enumerate() {
            let _ = write!(out, "{t} {:.6}", self.lambda_true[k]);
            for s in &self.summaries {
                match s.lambda_mean.get(k) {
                    Some(v) if v.is_finite() => {
                        let _ = write!(out, " {v:.6}");
                    }
                    _ => out.push_str(" NaN"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Random stream of replicate `r`: a pure function of `(seed, r)`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

fn baseline_on(baseline: &Baseline<f64>, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&t| baseline.cumulative_hazard(t)).collect()
}

fn failed(method: Method, e: Error) -> MethodEstimate {
    MethodEstimate { method: Some(method), error: Some(e.to_string()), ..Default::default() }
}

fn from_cox(method: Method, fit: &CoxFit<f64>, active: Option<Vec<usize>>, grid: &[f64]) -> MethodEstimate {
    MethodEstimate {
        method: Some(method),
        beta: Some(fit.beta.clone()),
        lambda: Some(baseline_on(&fit.baseline, grid)),
        active,
        iterations: Some(fit.iterations),
        ..Default::default()
    }
}

fn comparator(method: Method, complete: Result<CompleteDataset<f64>>, cfg: &BenchConfig) -> MethodEstimate {
    let run = || -> Result<MethodEstimate> {
        let data = complete?;
        if cfg.penalized() {
            let path = cox_lasso_path(&data, &cfg.lasso, &cfg.cox)?;
            let active = path.points[path.selected].active.clone();
            Ok(from_cox(method, &path.refit, Some(active), &cfg.lambda_grid))
        } else {
            Ok(from_cox(method, &cox_fit(&data, None, &cfg.cox)?, None, &cfg.lambda_grid))
        }
    };
    run().unwrap_or_else(|e| failed(method, e))
}

/// Fits every requested method on one generated dataset.
pub fn run_replicate(design: &SimDesign, cfg: &BenchConfig, seed: u64, index: usize) -> Result<ReplicateRecord> {
    let mut rng = replicate_rng(seed, index);
    let sim = gen_dataset_with(design, &mut rng)?;
    let boot_seed = rng.next_u64();
    let data = &sim.data;
    let grid = &cfg.lambda_grid;
    let mut estimates = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let est = match method {
            Method::Npmle => match fit_npmle(data, &cfg.fit, None) {
                Ok(fit) => {
                    let mut est = MethodEstimate {
                        method: Some(method),
                        beta: Some(fit.params.beta.clone()),
                        lambda: Some(baseline_on(&fit.params.baseline, grid)),
                        iterations: Some(fit.iterations),
                        max_descent: Some(fit.max_descent()),
                        ..Default::default()
                    };
                    if !fit.converged {
                        est.error = Some("EM did not converge".into());
                        est.beta = None;
                    } else if cfg.bootstrap >= 2 && cfg.bootstrap_limit.is_none_or(|l| index < l) {
                        match bootstrap(data, &fit.params, &cfg.fit, cfg.bootstrap, cfg.ci_level, boot_seed) {
                            Ok(b) => {
                                est.se = Some(b.se);
                                est.ci_lower = Some(b.ci_lower);
                                est.ci_upper = Some(b.ci_upper);
                                est.bootstrap_failed = Some(b.n_failed);
                            }
                            Err(e) => log::warn!("replicate {index}: bootstrap failed: {e}"),
                        }
                    }
                    est
                }
                Err(e) => failed(method, e),
            },
            Method::PenalizedNpmle => match tune_path(data, &cfg.fit, &cfg.lasso) {
                Ok(path) => {
                    let descent = path
                        .points
                        .iter()
                        .filter_map(|p| p.max_descent)
                        .chain(std::iter::once(path.refit.max_descent()))
                        .fold(0.0, f64::max);
                    MethodEstimate {
                        method: Some(method),
                        beta: Some(path.refit.params.beta.clone()),
                        lambda: Some(baseline_on(&path.refit.params.baseline, grid)),
                        active: Some(path.selected_point().active.clone()),
                        iterations: Some(path.refit.iterations),
                        max_descent: Some(descent),
                        ..Default::default()
                    }
                }
                Err(e) => failed(method, e),
            },
            Method::CompleteCase => comparator(method, complete_case(data), cfg),
            Method::SingleImputation => comparator(method, single_impute(data), cfg),
        };
        if let Some(e) = &est.error {
            log::warn!("replicate {index}: {} failed: {e}", method.name());
        }
        estimates.push(est);
    }
    Ok(ReplicateRecord { index, censoring_rate: sim.censoring_rate(), missing_share: sim.missing_share(), estimates })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn summarize(design: &SimDesign, cfg: &BenchConfig, method: Method, records: &[ReplicateRecord]) -> MethodSummary {
    let ests: Vec<&MethodEstimate> = records
        .iter()
        .filter_map(|r| r.estimates.iter().find(|e| e.method == Some(method)))
        .filter(|e| e.beta.is_some())
        .collect();
    let n_ok = ests.len();
    let boot: Vec<&&MethodEstimate> = ests.iter().filter(|e| e.se.is_some()).collect();
    let coefficients = if n_ok == 0 {
        Vec::new()
    } else {
        (0..design.p)
            .map(|j| {
                let vals: Vec<f64> = ests.iter().map(|e| e.beta.as_ref().unwrap()[j]).collect();
                let truth = design.beta[j];
                let (see, cp) = if boot.is_empty() {
                    (None, None)
                } else {
                    let see = mean(&boot.iter().map(|e| e.se.as_ref().unwrap()[j]).collect::<Vec<_>>());
                    let cover = boot
                        .iter()
                        .filter(|e| {
                            e.ci_lower.as_ref().unwrap()[j] <= truth && truth <= e.ci_upper.as_ref().unwrap()[j]
                        })
                        .count();
                    (Some(see), Some(cover as f64 / boot.len() as f64))
                };
                CoefSummary { index: j, truth, bias: mean(&vals) - truth, se: sd(&vals), see, cp }
            })
            .collect()
    };
    let (mut tpr, mut fdr, mut mse) = (Vec::new(), Vec::new(), Vec::new());
    for e in &ests {
        let (a, b, c) = selection_metrics(e.beta.as_ref().unwrap(), &design.beta).expect("lengths match");
        tpr.push(a);
        fdr.push(b);
        mse.push(c);
    }
    let lambda_mean = (0..cfg.lambda_grid.len())
        .map(|k| {
            let v: Vec<f64> = ests.iter().filter_map(|e| e.lambda.as_ref().map(|l| l[k])).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                mean(&v)
            }
        })
        .collect();
    let max_descent = ests.iter().filter_map(|e| e.max_descent).reduce(f64::max);
    MethodSummary {
        method,
        n_ok,
        n_failed: records.len() - n_ok,
        coefficients,
        tpr: if n_ok > 0 { mean(&tpr) } else { f64::NAN },
        fdr: if n_ok > 0 { mean(&fdr) } else { f64::NAN },
        mse: if n_ok > 0 { mean(&mse) } else { f64::NAN },
        lambda_mean,
        max_descent,
        n_bootstrapped: boot.len(),
    }
}

/// Runs `cfg.replicates` replicates on `cfg.workers` threads and aggregates
/// them in replicate order.
pub fn run_benchmark(design: &SimDesign, cfg: &BenchConfig) -> Result<ReplicateReport> {
    design.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.seed.unwrap_or(design.seed);
    let records: Vec<Result<ReplicateRecord>> = with_workers(cfg.workers, || {
        (0..cfg.replicates).into_par_iter().map(|r| run_replicate(design, cfg, seed, r)).collect()
    })?;
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let summaries = cfg.methods.iter().map(|&m| summarize(design, cfg, m, &records)).collect();
    Ok(ReplicateReport {
        design: design.clone(),
        seed,
        n_replicates: cfg.replicates,
        methods: cfg.methods.clone(),
        bootstrap: cfg.bootstrap,
        lambda_grid: cfg.lambda_grid.clone(),
        lambda_true: cfg.lambda_grid.iter().map(|&t| design.cumulative_hazard(t)).collect(),
        summaries,
        replicates: records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let truth = [0.25, 0.25, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25];
        assert_eq!(selection_metrics(&truth, &truth).unwrap(), (1.0, 0.0, 0.0));
        let (tpr, fdr, mse) = selection_metrics(&[0.0; 10], &truth).unwrap();
        assert_eq!((tpr, fdr), (0.0, 0.0));
        assert!((mse - 0.5).abs() < 1e-15);
        assert!(selection_metrics(&[0.0; 3], &truth).is_err());
    }

    #[test]
    fn c_index_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let d = [true; 4];
        assert_eq!(c_index(&[4.0, 3.0, 2.0, 1.0], &y, &d).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0, 4.0], &y, &d).unwrap(), 0.0);
        // usable pairs: (1,2) (1,3) (1,4) (3,4); concordant (1,3) (1,4), tie (1,2), discordant (3,4)
        let v = c_index(&[2.0, 2.0, 0.5, 1.0], &y, &[true, false, true, false]).unwrap();
        assert!((v - 2.5 / 4.0).abs() < 1e-15);
        assert!(c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn builtins_validate() {
        for name in BUILTIN_DESIGNS {
            builtin(name).unwrap().validate().unwrap();
        }
        let d = table3(100, 0.2, false);
        assert_eq!(d.beta.iter().filter(|&&b| b != 0.0).count(), 8);
        assert_eq!(d.missing_coords.len(), 50);
    }

    #[test]
    fn toml_round_trip() {
        let d = table3(1000, 0.4, true);
        assert_eq!(SimDesign::from_toml_str(&d.to_toml_string()).unwrap(), d);
    }

    #[test]
    fn mar_infeasible_is_a_design_error() {
        let d = table2(100, 0.8);
        assert!(matches!(gen_dataset(&d, 1), Err(Error::Design(_))));
    }

    #[test]
    fn missing_share_is_exact() {
        let s = gen_dataset(&table1(200, 0.2), 3).unwrap();
        assert_eq!(s.missing_share(), 0.2);
        let s = gen_dataset(&table2(200, 0.4), 3).unwrap();
        assert_eq!(s.missing_share(), 0.4);
        for (subj, &sub) in s.data.subjects().iter().zip(&s.subcohort) {
            if sub {
                assert!(subj.mask.is_complete());
            }
        }
    }

    #[test]
    fn zero_replicates_rejected() {
        let cfg = BenchConfig { replicates: 0, ..Default::default() };
        assert!(run_benchmark(&table1(50, 0.2), &cfg).is_err());
    }
}
