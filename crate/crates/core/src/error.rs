//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural argument was invalid (empty set, reversed bounds, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A Q-function returned a non-finite value even after one resample.
    #[error("non-finite Q-value for candidate action {0:?}")]
    NonFiniteQ(Vec<f64>),

    /// A sampler step produced a non-finite intermediate.
    #[error("sampler produced non-finite value at step {step}")]
    Sampler { step: usize },

    /// Gradient tape used against parameters it was not recorded for.
    #[error("stale gradient tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("training aborted: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
