use thiserror::Error;

/// Errors raised by the numerical core and the data layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite after jitter escalation (last jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Data(err.to_string())
    }
}
