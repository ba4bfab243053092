//! Versioned JSON documents written by the fitting subcommands.

use std::fmt::Write as _;

use npcox::bootstrap_infer::BootstrapResult;
use npcox::em_fit::FitResult;
use npcox::lasso_path::LassoPath;
use npcox::{Baseline, Matrix, ParameterSet};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FIT_SCHEMA: &str = "npcox.fit/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Max-abs profile score per subject at the estimate.
    pub score_max: f64,
    /// Largest observed log-likelihood drop between EM iterations.
    pub max_descent: f64,
    pub stalled_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingColumn {
    pub name: String,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub gamma: f64,
    pub active: Vec<String>,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTable {
    pub gamma_max: f64,
    pub selected: usize,
    pub rows: Vec<PathRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    pub replicates: usize,
    pub failed: usize,
    pub level: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub schema: String,
    /// `npmle` or `lasso`.
    pub kind: String,
    pub n: usize,
    pub gaussian: Vec<String>,
    pub condition_on: Vec<String>,
    pub coefficients: Vec<Coefficient>,
    pub baseline: Baseline<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub loglik: f64,
    pub diagnostics: Diagnostics,
    pub missing: Vec<MissingColumn>,
    pub path: Option<PathTable>,
    pub bootstrap: Option<BootstrapInfo>,
}

impl FitOutput {
    pub fn from_fit(
        kind: &str,
        n: usize,
        names: &[String],
        p: usize,
        missing_fractions: &[f64],
        fit: &FitResult<f64>,
    ) -> Self {
        let params = &fit.params;
        Self {
            schema: FIT_SCHEMA.into(),
            kind: kind.into(),
            n,
            gaussian: names[..p].to_vec(),
            condition_on: names[p..].to_vec(),
            coefficients: names
                .iter()
                .zip(&params.beta)
                .map(|(name, &b)| Coefficient {
                    name: name.clone(),
                    estimate: b,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                })
                .collect(),
            baseline: params.baseline.clone(),
            mu: params.mu.clone(),
            sigma: params.sigma.to_rows(),
            loglik: fit.loglik,
            diagnostics: Diagnostics {
                iterations: fit.iterations,
                converged: fit.converged,
                score_max: fit.score_max,
                max_descent: fit.max_descent(),
                stalled_steps: fit.stalled_steps,
            },
            missing: names
                .iter()
                .zip(missing_fractions)
                .map(|(n, &f)| MissingColumn { name: n.clone(), fraction: f })
                .collect(),
            path: None,
            bootstrap: None,
        }
    }

    pub fn with_path(mut self, path: &LassoPath<f64>, names: &[String]) -> Self {
        self.path = Some(PathTable {
            gamma_max: path.gamma_max,
            selected: path.selected,
            rows: path
                .points
                .iter()
                .map(|pt| PathRow {
                    gamma: pt.gamma,
                    active: pt.active.iter().map(|&j| names[j].clone()).collect(),
                    loglik: pt.loglik,
                    bic: pt.bic,
                    converged: pt.converged,
                    error: pt.error.clone(),
                })
                .collect(),
        });
        self
    }

    pub fn with_bootstrap(mut self, b: &BootstrapResult, seed: u64) -> Self {
        for (j, c) in self.coefficients.iter_mut().enumerate() {
            c.se = Some(b.se[j]);
            c.ci_lower = Some(b.ci_lower[j]);
            c.ci_upper = Some(b.ci_upper[j]);
        }
        self.bootstrap = Some(BootstrapInfo { replicates: b.n_replicates, failed: b.n_failed, level: b.level, seed });
        self
    }

    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    pub fn params(&self) -> Result<ParameterSet<f64>, CliError> {
        let p = self.gaussian.len();
        if self.mu.len() != p || self.sigma.len() != p || self.sigma.iter().any(|r| r.len() != p) {
            return Err(CliError::data("model document has inconsistent mu/sigma dimensions"));
        }
        if self.coefficients.len() != p + self.condition_on.len() {
            return Err(CliError::data("model document has the wrong number of coefficients"));
        }
        Ok(ParameterSet {
            beta: self.beta(),
            baseline: self.baseline.clone(),
            mu: self.mu.clone(),
            sigma: Matrix::from_rows(&self.sigma),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.schema != FIT_SCHEMA {
            return Err(CliError::data(format!("unsupported schema {:?} (expected {FIT_SCHEMA})", doc.schema)));
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit output serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} fit, n = {}, log-likelihood = {:.4}", self.kind, self.n, self.loglik);
        let d = &self.diagnostics;
        let _ = writeln!(
            out,
            "iterations = {}, converged = {}, max score = {:.2e}",
            d.iterations, d.converged, d.score_max
        );
        let _ = writeln!(out, "{:<16} {:>12} {:>10} {:>12} {:>12}", "covariate", "estimate", "se", "lower", "upper");
        for c in &self.coefficients {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                out,
                "{:<16} {:>12.6} {:>10} {:>12} {:>12}",
                c.name,
                c.estimate,
                f(c.se),
                f(c.ci_lower),
                f(c.ci_upper)
            );
        }
        if let Some(path) = &self.path {
            let _ = writeln!(out, "\n{:>4} {:>12} {:>6} {:>14}", "k", "gamma", "size", "bic");
            for (k, r) in path.rows.iter().enumerate() {
                let mark = if k == path.selected { "*" } else { " " };
                let bic = r.bic.map_or("failed".to_string(), |b| format!("{b:.3}"));
                let _ = writeln!(out, "{k:>4} {:>12.6} {:>6} {bic:>14}{mark}", r.gamma, r.active.len());
            }
        }
        out
    }
}
