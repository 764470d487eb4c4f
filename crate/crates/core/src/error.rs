//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch; the message names the offending shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation contract (bad axis, non-scalar loss, index out of range).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or malformed data (manifest, image files, empty corpus).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN/Inf gradients, zero-norm feature, divergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container problems: bad magic, version mismatch, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
