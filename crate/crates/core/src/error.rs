//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the tape/autodiff engine.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("variable does not belong to this tape")]
    TapeMismatch,
    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite value encountered in {context} at coordinate {coord}")]
    NonFinite { context: String, coord: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type AdResult<T> = Result<T, AdError>;

/// Errors raised by the problem corpus.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem family '{name}'; known families: {known}")]
    UnknownFamily { name: String, known: String },
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("problem '{0}' has no data sampler")]
    NoSampler(String),
    #[error("transformation incompatible with problem: {0}")]
    IncompatibleTransform(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type ProblemResult<T> = Result<T, ProblemError>;

/// Errors raised by optimizer runs and meta-training.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("loss diverged (non-finite or above threshold) at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type RunResult<T> = Result<T, RunError>;
