//! Plain evaluation loops: run an optimizer on a problem and collect the
//! loss curve. One record per step plus a final post-update evaluation.

use crate::baselines::{baseline_step, problem_gradient, BaselineConfig, BaselineSlots};
use crate::error::RunResult;
use crate::ndarray::NdArray;
use crate::optimizer::{init_state, init_state_with, optimizer_step, MetaParams, MetaVars, RunSeeds, TapedState};
use crate::problems::Problem;
use crate::rng;
use crate::tape::Tape;
use std::time::Instant;

/// Inner losses above this value (or any non-finite loss) end the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e10;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Loss at theta_0 .. theta_N (pre-update each step, then a final eval).
    pub losses: Vec<f64>,
    /// Mean log learning rate per recorded step (ln lr for baselines).
    pub mean_log_lrs: Vec<f64>,
    /// Cumulative wall time per record; zeros unless timing was requested.
    pub wall_ms: Vec<f64>,
    pub diverged: bool,
}

impl RunOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

fn is_divergent(loss: f64) -> bool {
    !loss.is_finite() || loss.abs() > DIVERGENCE_THRESHOLD
}

/// Run the learned optimizer for `steps` iterations.
pub fn run_learned(
    problem: &Problem,
    meta: &MetaParams,
    steps: u64,
    seeds: &RunSeeds,
    init_lr_override: Option<f64>,
    timing: bool,
) -> RunResult<RunOutcome> {
    let mut state = match init_lr_override {
        Some(lr) => {
            let mut prng = rng::rng_seeded(seeds.params);
            let theta0 = problem.init_params(&mut prng);
            init_state_with(meta, theta0, lr, seeds.noise)
        }
        None => init_state(meta, problem, seeds),
    };
    let mut data_rng = rng::rng_seeded(seeds.data);
    let mut noise_rng = rng::rng_seeded(seeds.noise);

    let mut out = RunOutcome {
        losses: Vec::with_capacity(steps as usize + 1),
        mean_log_lrs: Vec::with_capacity(steps as usize + 1),
        wall_ms: Vec::with_capacity(steps as usize + 1),
        diverged: false,
    };
    let started = Instant::now();
    let mut tape = Tape::new();

    for _ in 0..steps {
        tape.clear();
        let mv = MetaVars::import(&mut tape, meta);
        let mut st = TapedState::import(&mut tape, &state);
        let batch = if problem.has_sampler() {
            Some(problem.sample_minibatch(&mut data_rng)?)
        } else {
            None
        };
        let mean_lr = state.mean_log_lr();
        let loss = match optimizer_step(
            &mut tape,
            &mv,
            &mut st,
            problem,
            batch.as_ref(),
            false,
            &mut noise_rng,
        ) {
            Ok(l) => tape.value(l).item(),
            Err(crate::error::RunError::Diverged { .. }) => {
                out.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        out.losses.push(loss);
        out.mean_log_lrs.push(mean_lr);
        out.wall_ms
            .push(if timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 });
        if is_divergent(loss) {
            out.diverged = true;
            break;
        }
        state = st.export(&tape);
        if state.tensors.iter().any(|t| !t.theta.all_finite()) {
            out.diverged = true;
            break;
        }
    }

    if !out.diverged {
        let batch = if problem.has_sampler() {
            Some(problem.sample_minibatch(&mut data_rng)?)
        } else {
            None
        };
        let theta: Vec<NdArray> = state
            .tensors
            .iter()
            .map(|t| t.theta.reshape(&t.shape).expect("shape"))
            .collect();
        let final_loss = problem.loss_value(&theta, batch.as_ref())?;
        out.losses.push(final_loss);
        out.mean_log_lrs.push(state.mean_log_lr());
        out.wall_ms
            .push(if timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 });
        if is_divergent(final_loss) {
            out.diverged = true;
        }
    }
    Ok(out)
}

/// Run a baseline optimizer for `steps` iterations.
pub fn run_baseline(
    problem: &Problem,
    config: &BaselineConfig,
    steps: u64,
    seeds: &RunSeeds,
) -> RunResult<RunOutcome> {
    let mut prng = rng::rng_seeded(seeds.params);
    let mut theta = problem.init_params(&mut prng);
    let mut data_rng = rng::rng_seeded(seeds.data);
    let mut slots = BaselineSlots::zeros(problem.param_shapes());
    let log_lr = config.learning_rate.ln();

    let mut out = RunOutcome {
        losses: Vec::with_capacity(steps as usize + 1),
        mean_log_lrs: Vec::with_capacity(steps as usize + 1),
        wall_ms: Vec::with_capacity(steps as usize + 1),
        diverged: false,
    };

    for _ in 0..steps {
        let batch = if problem.has_sampler() {
            Some(problem.sample_minibatch(&mut data_rng)?)
        } else {
            None
        };
        let (loss, grads) = problem_gradient(problem, &theta, batch.as_ref())?;
        out.losses.push(loss);
        out.mean_log_lrs.push(log_lr);
        out.wall_ms.push(0.0);
        if is_divergent(loss) {
            out.diverged = true;
            break;
        }
        baseline_step(config, &mut slots, &mut theta, &grads);
        if theta.iter().any(|t| !t.all_finite()) {
            out.diverged = true;
            break;
        }
    }

    if !out.diverged {
        let batch = if problem.has_sampler() {
            Some(problem.sample_minibatch(&mut data_rng)?)
        } else {
            None
        };
        let final_loss = problem.loss_value(&theta, batch.as_ref())?;
        out.losses.push(final_loss);
        out.mean_log_lrs.push(log_lr);
        out.wall_ms.push(0.0);
        if is_divergent(final_loss) {
            out.diverged = true;
        }
    }
    Ok(out)
}
