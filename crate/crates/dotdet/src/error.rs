//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A region or box lies outside the raster it addresses, or is empty.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation was called on state that is not ready for it
    /// (e.g. an uninitialized EMA reference).
    #[error("invalid state: {0}")]
    State(String),

    /// Vector or raster dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Scene or dataset generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A metric is undefined for the given inputs (e.g. AP with zero
    /// ground truths).
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// Configuration rejected before any work started.
    #[error("invalid config: {0}")]
    Config(String),

    /// Snapshot or manifest contents could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
