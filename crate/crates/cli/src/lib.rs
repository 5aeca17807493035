//! Command-line harness for the hierarchical RNN learned optimizer:
//! meta-training, evaluation runs, learning-rate sweeps, ablations, and
//! overhead benchmarks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod flag_sets;
pub mod mnist;
pub mod problem_args;
