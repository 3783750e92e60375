use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solvers, trainers and the run orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("forward cache does not match the model or the upstream gradient: {0}")]
    CacheMismatch(&'static str),

    #[error("non-finite value in {loss} at step {step}")]
    NonFinite { loss: String, step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("weights must be strictly positive and sum to 1: {0}")]
    InvalidWeights(String),

    #[error("instance too large for exhaustive search: {rows}x{cols} ({limit})")]
    InstanceTooLarge {
        rows: usize,
        cols: usize,
        limit: &'static str,
    },

    #[error("plan row {0} has zero mass")]
    ZeroRowMass(usize),

    #[error(
        "sinkhorn did not converge in {iterations} iterations (marginal error {marginal_error:e})"
    )]
    NotConverged {
        iterations: usize,
        marginal_error: f64,
    },

    #[error("unknown experiment '{name}'; known experiments: {known}")]
    UnknownExperiment { name: String, known: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
