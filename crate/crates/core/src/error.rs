//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by model construction, likelihood evaluation and sampling.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input value lies outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numerical routine failed (factorization, divergence, non-finite
    /// intermediate).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input data violate a structural contract (signs, censoring flags,
    /// missingness pattern).
    #[error("invalid data: {0}")]
    Data(String),

    /// Sampler or run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A gradient was requested for a block updated without gradients.
    #[error("unsupported block: {0}")]
    UnsupportedBlock(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn unsupported_block(msg: impl Into<String>) -> Self {
        Error::UnsupportedBlock(msg.into())
    }
}
