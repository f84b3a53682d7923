use thiserror::Error;

/// Errors raised by model construction, estimation and file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("covariance is not symmetric positive definite{0}")]
    NotPositiveDefinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("structurally incompatible models: {0}")]
    Incompatible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures caused by the numbers rather than the input shape.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NotPositiveDefinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
