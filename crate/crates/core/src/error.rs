use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or widths that do not chain, or a malformed configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Behaviors in one batch do not share a covariance.
    #[error("assumption violated: {0}")]
    Assumption(String),

    /// Two deviations coincide, the pairwise norm has no gradient there.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// Finite-difference oracle met a non-finite function value.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Non-finite network output or loss during training.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Malformed checkpoint or trajectory file.
    #[error("format error: {0}")]
    Format(String),

    /// Parse failure in a run configuration file.
    #[error("{path}:{line}: key `{key}`: {message}")]
    ConfigKey {
        path: String,
        line: usize,
        key: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
