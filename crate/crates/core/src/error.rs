use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular covariance on observed block for mask {mask}")]
    SingularCovariance { mask: String },

    #[error("integration failure{}: {detail}", subject.map(|i| format!(" (subject {i})")).unwrap_or_default())]
    IntegrationFailure { subject: Option<usize>, detail: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("coordinate descent did not converge after {sweeps} sweeps (last change {last_change:e})")]
    CoordinateDescent { sweeps: usize, last_change: f64, last_iterate: Vec<f64> },

    #[error("non-convergence: {0}")]
    NonConvergence(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid design: {0}")]
    Design(String),

    #[error("inference unreliable: {failed} of {total} bootstrap replicates failed")]
    InferenceUnreliable { failed: usize, total: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn integration(subject: Option<usize>, detail: impl Into<String>) -> Self {
        Error::IntegrationFailure { subject, detail: detail.into() }
    }

    /// Attaches a subject index to an integration failure that lacks one.
    pub fn with_subject(self, index: usize) -> Self {
        match self {
            Error::IntegrationFailure { subject: None, detail } => {
                Error::IntegrationFailure { subject: Some(index), detail }
            }
            other => other,
        }
    }
}
