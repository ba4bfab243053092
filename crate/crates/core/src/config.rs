//! Run configuration shared by the library entry points and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::CoxConfig;
use crate::em_fit::FitConfig;
use crate::error::{Error, Result};
use crate::gaussian::Completion;
use crate::lasso_path::LassoConfig;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "NPCOX_WORKERS";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub em: EmSection,
    pub quadrature: QuadratureSection,
    pub lasso: LassoConfig,
    pub cox: CoxConfig,
    pub bootstrap: BootstrapSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub max_iter: usize,
    pub tol: f64,
    pub step_halving_max: usize,
    pub verbose: bool,
}

impl Default for EmSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self { max_iter: f.max_iter, tol: f.tol, step_halving_max: f.step_halving_max, verbose: f.verbose }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSection {
    pub order: usize,
    pub completion: Completion,
}

impl Default for QuadratureSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self { order: f.quad_order, completion: f.completion }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self { replicates: 500, level: 0.95 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            max_iter: self.em.max_iter,
            tol: self.em.tol,
            quad_order: self.quadrature.order,
            step_halving_max: self.em.step_halving_max,
            verbose: self.em.verbose,
            completion: self.quadrature.completion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fit().validate()?;
        self.lasso.validate()?;
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err(Error::Config("bootstrap.level must lie in (0, 1)".into()));
        }
        if self.run.workers == Some(0) {
            return Err(Error::Config("run.workers must be positive".into()));
        }
        Ok(())
    }
}

/// Explicit count, else the environment variable, else rayon's default.
pub fn resolve_workers(explicit: Option<usize>) -> Result<Option<usize>> {
    if let Some(w) = explicit {
        return if w == 0 { Err(Error::Config("worker count must be positive".into())) } else { Ok(Some(w)) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(Some(w)),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs `f` inside a dedicated pool of `workers` threads (or the global pool for `None`).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::from_toml_str("[em]\ntol = 1e-6\n[lasso]\nn_gammas = 10\n").unwrap();
        assert_eq!(cfg.fit().tol, 1e-6);
        assert_eq!(cfg.fit().quad_order, 30);
        assert_eq!(cfg.lasso.n_gammas, 10);
        assert!(cfg.lasso.standardize);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("[em]\ntolerance = 1\n").is_err());
        assert!(Config::from_toml_str("[quadrature]\norder = 2\n").is_err());
        assert!(Config::from_toml_str("[bootstrap]\nlevel = 1.5\n").is_err());
    }

    #[test]
    fn pool_size_applies() {
        let n = with_workers(Some(3), rayon::current_num_threads).unwrap();
        assert_eq!(n, 3);
    }
}
