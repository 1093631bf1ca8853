use thiserror::Error;

/// Errors produced by the simulation library and the experiment layer.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),
    #[error("estimation failure: {0}")]
    EstimationFailure(String),
    #[error("inconclusive result: {0}")]
    Inconclusive(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Process exit code for the CLI: 2 for rejected inputs, 3 for
    /// inconclusive experiment outcomes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::InvalidArgument(_)
            | SimError::Validation(_)
            | SimError::Config(_)
            | SimError::Json(_) => 2,
            SimError::Inconclusive(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidArgument(msg.into())
}
