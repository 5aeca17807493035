//! Hierarchical RNN learned optimizer.
//!
//! A three-level GRU stack (per-parameter, per-tensor, global) drives
//! gradient-descent updates through optimization-inspired features:
//! Nesterov-style lookahead, momentum on several timescales, dynamic input
//! scaling, and a direction/step-length decomposition. The crate bundles
//! the optimizer with a reverse-mode autodiff engine that supports
//! differentiating through gradient computations, a corpus of small target
//! problems for meta-training, tuned baseline optimizers, and the unrolled
//! meta-training loop itself.

pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod meta;
pub mod ndarray;
pub mod optimizer;
pub mod problems;
pub mod rng;
pub mod runner;
pub mod tape;

pub use error::{AdError, AdResult, ProblemError, ProblemResult, RunError, RunResult};
pub use ndarray::NdArray;
pub use tape::{OpKind, Tape, Var};
