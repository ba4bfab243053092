pub mod baselines;
pub mod bootstrap_infer;
pub mod config;
pub mod data;
pub mod em_fit;
pub mod error;
pub mod estep;
pub mod gaussian;
pub mod lasso_path;
pub mod linalg;
pub mod quadrature;
pub mod real;
pub mod sim_bench;

pub use data::{Baseline, Dataset, ObservedSubject, ParameterSet};
pub use error::{Error, Result};
pub use gaussian::{Completion, MissingMask};
pub use linalg::Matrix;
pub use real::Real;

pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type ParameterSet64 = ParameterSet<f64>;
pub type ParameterSet32 = ParameterSet<f32>;
pub type FitResult64 = em_fit::FitResult<f64>;
pub type FitResult32 = em_fit::FitResult<f32>;
pub type LassoPath64 = lasso_path::LassoPath<f64>;
pub type LassoPath32 = lasso_path::LassoPath<f32>;
