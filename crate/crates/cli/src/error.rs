use std::fmt;
use std::path::Path;

/// Stable exit codes; the diagnostic line carries the matching `E0xx` tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Data,
    Config,
    Numeric,
    NonConvergence,
    Inference,
    Design,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Usage => 2,
            Self::Io => 3,
            Self::Data => 4,
            Self::Config => 5,
            Self::Numeric => 6,
            Self::NonConvergence => 7,
            Self::Inference => 8,
            Self::Design => 9,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Usage => "E002",
            Self::Io => "E003",
            Self::Data => "E004",
            Self::Config => "E005",
            Self::Numeric => "E006",
            Self::NonConvergence => "E007",
            Self::Inference => "E008",
            Self::Design => "E009",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.tag(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<npcox::Error> for CliError {
    fn from(e: npcox::Error) -> Self {
        use npcox::Error as E;
        let kind = match &e {
            E::InvalidInput(_) => ErrorKind::Data,
            E::Config(_) => ErrorKind::Config,
            E::Design(_) => ErrorKind::Design,
            E::NonConvergence(_) | E::CoordinateDescent { .. } => ErrorKind::NonConvergence,
            E::InferenceUnreliable { .. } => ErrorKind::Inference,
            E::SingularCovariance { .. } | E::IntegrationFailure { .. } | E::ContractViolation(_) | E::Numeric(_) => {
                ErrorKind::Numeric
            }
        };
        Self::new(kind, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(format!("malformed JSON: {e}"))
    }
}
