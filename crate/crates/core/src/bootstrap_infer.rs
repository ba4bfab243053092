//! Nonparametric bootstrap standard errors and percentile intervals for β̂.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ParameterSet};
use crate::em_fit::{adapt_params, fit_npmle_from, FitConfig};
use crate::error::{Error, Result};

/// Replicates beyond this failure share make the inference unreliable.
pub const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    /// Percentile interval.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// `estimate ± z·se`.
    pub normal_lower: Vec<f64>,
    pub normal_upper: Vec<f64>,
    pub level: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

impl BootstrapResult {
    /// Whether the percentile interval of coordinate `j` contains `value`.
    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_lower[j] <= value && value <= self.ci_upper[j]
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resampling indices of replicate `r`; a pure function of `(seed, r)`.
pub fn resample_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Refits `fit_npmle` on `replicates` resamples, each warm-started from `full`.
pub fn bootstrap(
    data: &Dataset<f64>,
    full: &ParameterSet<f64>,
    config: &FitConfig,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    if replicates < 2 {
        return Err(Error::InvalidInput("the bootstrap needs at least two replicates".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput("confidence level must lie in (0, 1)".into()));
    }
    let dim = data.dim();
    let fits: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let sample = data.resample(&resample_indices(data.n(), seed, r));
            let run = || -> Result<Vec<f64>> {
                let init = adapt_params(&sample, full)?;
                let fit = fit_npmle_from(&sample, config, None, init)?;
                if !fit.converged {
                    return Err(Error::NonConvergence("bootstrap replicate".into()));
                }
                Ok(fit.params.beta)
            };
            match run() {
                Ok(b) => Some(b),
                Err(e) => {
                    log::debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let n_failed = replicates - ok.len();
    if n_failed as f64 > MAX_FAILED_SHARE * replicates as f64 || ok.len() < 2 {
        return Err(Error::InferenceUnreliable { failed: n_failed, total: replicates });
    }
    let z =
        statrs::distribution::ContinuousCDF::inverse_cdf(&statrs::distribution::Normal::standard(), 0.5 + level / 2.0);
    let alpha = 1.0 - level;
    let mut out = BootstrapResult {
        estimate: full.beta.clone(),
        se: Vec::with_capacity(dim),
        ci_lower: Vec::with_capacity(dim),
        ci_upper: Vec::with_capacity(dim),
        normal_lower: Vec::with_capacity(dim),
        normal_upper: Vec::with_capacity(dim),
        level,
        n_replicates: replicates,
        n_failed,
    };
    let k = ok.len() as f64;
    for j in 0..dim {
        let mut v: Vec<f64> = ok.iter().map(|b| b[j]).collect();
        let mean = v.iter().sum::<f64>() / k;
        let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        v.sort_by(f64::total_cmp);
        out.se.push(se);
        out.ci_lower.push(quantile_sorted(&v, alpha / 2.0));
        out.ci_upper.push(quantile_sorted(&v, 1.0 - alpha / 2.0));
        out.normal_lower.push(full.beta[j] - z * se);
        out.normal_upper.push(full.beta[j] + z * se);
        if !out.covers(j, full.beta[j]) {
            log::info!("percentile interval for coefficient {j} excludes the point estimate");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.1) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn indices_depend_on_seed_and_replicate_only() {
        assert_eq!(resample_indices(50, 7, 3), resample_indices(50, 7, 3));
        assert_ne!(resample_indices(50, 7, 3), resample_indices(50, 7, 4));
        assert!(resample_indices(50, 7, 3).iter().all(|&i| i < 50));
    }

    #[test]
    fn rejects_single_replicate() {
        let d = Dataset::from_complete(&[1.0, 2.0], &[true, false], &[vec![0.0], vec![1.0]]).unwrap();
        let p = crate::em_fit::initial_params(&d).unwrap();
        assert!(bootstrap(&d, &p, &FitConfig::default(), 1, 0.95, 0).is_err());
    }
}
