use thiserror::Error;

pub type Result<T, E = BsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BsaError {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An attention row with no admissible key.
    #[error("fully masked attention row {row}")]
    FullyMasked { row: usize },

    #[error("workspace does not match this call: {0}")]
    StaleWorkspace(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BsaError {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            BsaError::InvalidInput(_) => "invalid-input",
            BsaError::InvalidArgument(_) => "invalid-argument",
            BsaError::Shape(_) => "shape",
            BsaError::InvalidConfig(_) => "invalid-config",
            BsaError::FullyMasked { .. } => "fully-masked",
            BsaError::StaleWorkspace(_) => "stale-workspace",
            BsaError::Format(_) => "format",
            BsaError::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> BsaError {
    BsaError::Shape(what.into())
}
