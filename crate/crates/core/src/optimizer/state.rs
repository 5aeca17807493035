//! Per-run optimizer state, in plain-value and on-tape forms.

use super::meta_params::MetaParams;
use crate::error::AdResult;
use crate::ndarray::NdArray;
use crate::problems::Problem;
use crate::rng;
use crate::tape::{Tape, Var};

/// Seeds for the independent random streams of one optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub params: u64,
    pub init_lr: u64,
    pub data: u64,
    pub noise: u64,
}

impl RunSeeds {
    pub fn from_master(master: u64) -> RunSeeds {
        RunSeeds {
            params: rng::derive_seed(master, 1, 0),
            init_lr: rng::derive_seed(master, 2, 0),
            data: rng::derive_seed(master, 3, 0),
            noise: rng::derive_seed(master, 4, 0),
        }
    }
}

/// State attached to one parameter tensor (flattened to length N).
#[derive(Debug, Clone)]
pub struct TensorState {
    /// Original tensor shape in the target problem.
    pub shape: Vec<usize>,
    pub theta: NdArray,
    pub phi: NdArray,
    /// Parameter RNN hidden states, N x K_P.
    pub h_param: NdArray,
    /// Averaged gradients per timescale, N x S.
    pub g_avg: NdArray,
    /// Running square-average of the averaged gradients. N x S by default,
    /// N x (S+1) under the previous-timescale variant (column 0 tracks the
    /// raw gradient).
    pub lambda: NdArray,
    /// Per-parameter log learning rate and its running average.
    pub eta: NdArray,
    pub eta_bar: NdArray,
    /// Momentum logits output at the previous step (zero before step one).
    pub beta_g: NdArray,
    pub beta_lambda: NdArray,
}

/// Mutable per-run state of the learned optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub tensors: Vec<TensorState>,
    pub h_tensor: Vec<NdArray>,
    pub h_global: NdArray,
    pub step: u64,
    /// Parameter-noise scale for this run (zero when the variant is off).
    pub noise_alpha: f64,
    /// Shared log learning rate the run started from.
    pub init_log_lr: f64,
}

/// Initialize run state: learned (or zero) hidden states, zero averages
/// and square-average accumulators, and a single init learning rate drawn
/// log-uniform over [1e-6, 1e-2] shared across all parameters. Lambda
/// starts at zero so the scaled averaged gradients are invariant to
/// gradient scale from the first step; the floor under the sqrt keeps them
/// defined.
pub fn init_state(meta: &MetaParams, problem: &Problem, seeds: &RunSeeds) -> OptimizerState {
    let mut prng = rng::rng_seeded(seeds.params);
    let theta0 = problem.init_params(&mut prng);
    let mut lrng = rng::rng_seeded(seeds.init_lr);
    let lr0 = rng::log_uniform(&mut lrng, 1e-6, 1e-2);
    init_state_with(meta, theta0, lr0, seeds.noise)
}

/// As [`init_state`] but with the initial point and learning rate pinned.
pub fn init_state_with(
    meta: &MetaParams,
    theta0: Vec<NdArray>,
    init_lr: f64,
    noise_seed: u64,
) -> OptimizerState {
    let s = meta.flags.s();
    let lambda_cols = if meta.flags.appendix_prev_timescale { s + 1 } else { s };
    let log_lr = init_lr.ln();
    let tensors = theta0
        .into_iter()
        .map(|t| {
            let shape = t.shape().to_vec();
            let n = t.len();
            let flat = t.reshape(&[n]).expect("flatten");
            let h_param = if meta.flags.trainable_init {
                meta.init_h_param.broadcast_row(n).expect("h init")
            } else {
                NdArray::zeros(&[n, meta.sizes.k_param])
            };
            TensorState {
                shape,
                theta: flat.clone(),
                phi: flat,
                h_param,
                g_avg: NdArray::zeros(&[n, s]),
                lambda: NdArray::zeros(&[n, lambda_cols]),
                eta: NdArray::filled(&[n], log_lr),
                eta_bar: NdArray::filled(&[n], log_lr),
                beta_g: NdArray::zeros(&[n]),
                beta_lambda: NdArray::zeros(&[n]),
            }
        })
        .collect::<Vec<_>>();
    let n_tensors = tensors.len();
    let noise_alpha = if meta.flags.appendix_param_noise {
        let mut nrng = rng::rng_seeded(noise_seed);
        rng::log_uniform(&mut nrng, 1e-10, 1e-2)
    } else {
        0.0
    };
    OptimizerState {
        tensors,
        h_tensor: (0..n_tensors)
            .map(|_| {
                if meta.flags.trainable_init {
                    meta.init_h_tensor.clone()
                } else {
                    NdArray::zeros(&[meta.sizes.k_tensor])
                }
            })
            .collect(),
        h_global: if meta.flags.trainable_init {
            meta.init_h_global.clone()
        } else {
            NdArray::zeros(&[meta.sizes.k_global])
        },
        step: 0,
        noise_alpha,
        init_log_lr: log_lr,
    }
}

impl OptimizerState {
    /// Mean log learning rate across all parameters.
    pub fn mean_log_lr(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for t in &self.tensors {
            sum += t.eta.data().iter().sum::<f64>();
            n += t.eta.len();
        }
        sum / n as f64
    }
}

/// On-tape mirror of [`TensorState`].
#[derive(Debug, Clone, Copy)]
pub struct TapedTensorState {
    pub theta: Var,
    pub phi: Var,
    pub h_param: Var,
    pub g_avg: Var,
    pub lambda: Var,
    pub eta: Var,
    pub eta_bar: Var,
    pub beta_g: Var,
    pub beta_lambda: Var,
}

/// On-tape mirror of [`OptimizerState`]. Values are severed from prior
/// history on import, which is what truncates gradient flow at unroll
/// boundaries.
#[derive(Debug, Clone)]
pub struct TapedState {
    pub shapes: Vec<Vec<usize>>,
    pub tensors: Vec<TapedTensorState>,
    pub h_tensor: Vec<Var>,
    pub h_global: Var,
    pub step: u64,
    pub noise_alpha: f64,
    pub init_log_lr: f64,
}

impl TapedState {
    pub fn import(tape: &mut Tape, state: &OptimizerState) -> TapedState {
        TapedState {
            shapes: state.tensors.iter().map(|t| t.shape.clone()).collect(),
            tensors: state
                .tensors
                .iter()
                .map(|t| TapedTensorState {
                    theta: tape.leaf(t.theta.clone()),
                    phi: tape.leaf(t.phi.clone()),
                    h_param: tape.leaf(t.h_param.clone()),
                    g_avg: tape.leaf(t.g_avg.clone()),
                    lambda: tape.leaf(t.lambda.clone()),
                    eta: tape.leaf(t.eta.clone()),
                    eta_bar: tape.leaf(t.eta_bar.clone()),
                    beta_g: tape.leaf(t.beta_g.clone()),
                    beta_lambda: tape.leaf(t.beta_lambda.clone()),
                })
                .collect(),
            h_tensor: state.h_tensor.iter().map(|h| tape.leaf(h.clone())).collect(),
            h_global: tape.leaf(state.h_global.clone()),
            step: state.step,
            noise_alpha: state.noise_alpha,
            init_log_lr: state.init_log_lr,
        }
    }

    /// Import a fresh run so the learned initial hidden states stay
    /// connected to the meta-parameter leaves (used by the first unroll).
    pub fn import_trainable_init(
        tape: &mut Tape,
        state: &OptimizerState,
        init_h_param: Var,
        init_h_tensor: Var,
        init_h_global: Var,
    ) -> AdResult<TapedState> {
        let mut imported = TapedState::import(tape, state);
        for ts in imported.tensors.iter_mut() {
            let n = tape.value(ts.theta).len();
            ts.h_param = tape.broadcast_row(init_h_param, n)?;
        }
        for h in imported.h_tensor.iter_mut() {
            *h = init_h_tensor;
        }
        imported.h_global = init_h_global;
        Ok(imported)
    }

    /// Copy current values back out of the tape.
    pub fn export(&self, tape: &Tape) -> OptimizerState {
        OptimizerState {
            tensors: self
                .tensors
                .iter()
                .zip(&self.shapes)
                .map(|(t, shape)| TensorState {
                    shape: shape.clone(),
                    theta: tape.value(t.theta).clone(),
                    phi: tape.value(t.phi).clone(),
                    h_param: tape.value(t.h_param).clone(),
                    g_avg: tape.value(t.g_avg).clone(),
                    lambda: tape.value(t.lambda).clone(),
                    eta: tape.value(t.eta).clone(),
                    eta_bar: tape.value(t.eta_bar).clone(),
                    beta_g: tape.value(t.beta_g).clone(),
                    beta_lambda: tape.value(t.beta_lambda).clone(),
                })
                .collect(),
            h_tensor: self.h_tensor.iter().map(|h| tape.value(*h).clone()).collect(),
            h_global: tape.value(self.h_global).clone(),
            step: self.step,
            noise_alpha: self.noise_alpha,
            init_log_lr: self.init_log_lr,
        }
    }
}
