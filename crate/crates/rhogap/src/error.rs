//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Gram factorization failed even after escalating the diagonal jitter.
    #[error("numerical conditioning failure: {message} (final jitter tried: {final_jitter:.3e})")]
    NumericalConditioning { message: String, final_jitter: f64 },

    /// An operation needed more samples than the dataset provides.
    #[error("insufficient data: {required} samples required, {available} available")]
    InsufficientData { available: usize, required: usize },

    /// A mathematical precondition does not hold at the queried point.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line interface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::NumericalConditioning { .. } => 3,
            Error::InsufficientData { .. } => 4,
            _ => 1,
        }
    }
}
