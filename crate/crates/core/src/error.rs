//! Crate-wide error type. Variants are grouped by what the caller can do
//! about them: fix a config, fix the data, or treat the run as numerically
//! dead (the training abort path).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape or extent mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-contract input data (masks, corpora, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// Byte-level parse failure in an on-disk format. `offset` is the byte
    /// position of the first offending byte.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    /// An operation produced NaN or Inf. This is always a hard error.
    #[error("numerical error: non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Training aborted, usually after a NonFinite surfaced mid-run.
    /// Carries enough context to diagnose the blow-up.
    #[error("training aborted at step {step} (lr {lr:.6}): {msg}; recent losses: {recent:?}")]
    TrainAbort {
        step: usize,
        lr: f64,
        msg: String,
        recent: Vec<f64>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for the numerical-abort family (exit code 2 at the CLI).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::TrainAbort { .. })
    }
}
