//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape or geometry violation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Autodiff graph problem (non-scalar root, missing adjoint, non-finite values).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Invalid model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Volume file format problem.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Checkpoint integrity or compatibility problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metric precondition violation (length/extent mismatch, degenerate input).
    #[error("metric error: {0}")]
    Metric(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn autodiff(msg: impl Into<String>) -> Self {
        Error::Autodiff(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn metric(msg: impl Into<String>) -> Self {
        Error::Metric(msg.into())
    }

    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
}
