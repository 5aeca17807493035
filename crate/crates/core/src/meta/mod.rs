//! Meta-training: heavy-tailed unroll schedules, the log meta-objective,
//! backpropagation through partial unrolls with full second derivatives,
//! and RMSProp over the meta-parameters.

mod train;

pub use train::{meta_train, MetaEvent, MetaLogRecord, MetaTrainConfig};

use crate::error::{RunError, RunResult};
use crate::ndarray::NdArray;
use crate::optimizer::{init_state, optimizer_step, MetaParams, MetaVars, RunSeeds, TapedState};
use crate::problems::Problem;
use crate::rng;
use crate::runner::DIVERGENCE_THRESHOLD;
use crate::tape::{Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Counts of partial unrolls and inner steps per unroll.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnrollSchedule {
    pub steps_per_unroll: Vec<u64>,
}

impl UnrollSchedule {
    pub fn num_unrolls(&self) -> usize {
        self.steps_per_unroll.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_unroll.iter().sum()
    }
}

/// Exponential-plus-offset distribution parameters for the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub scale_unrolls: f64,
    pub offset_unrolls: u64,
    pub scale_steps: f64,
    pub offset_steps: u64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            scale_unrolls: 50.0,
            offset_unrolls: 1,
            scale_steps: 200.0,
            offset_steps: 50,
        }
    }
}

/// Draw a schedule: the number of unrolls and each unroll's length are
/// offset + rounded exponential draws.
pub fn sample_schedule(rng: &mut ChaCha8Rng, params: &ScheduleParams) -> UnrollSchedule {
    assert!(params.scale_unrolls > 0.0 && params.scale_steps > 0.0);
    let num = params.offset_unrolls + rng::exponential(rng, params.scale_unrolls).round() as u64;
    let num = num.max(1);
    let steps_per_unroll = (0..num)
        .map(|_| {
            (params.offset_steps + rng::exponential(rng, params.scale_steps).round() as u64).max(1)
        })
        .collect();
    UnrollSchedule { steps_per_unroll }
}

/// Which functional of the per-step losses meta-training minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaObjective {
    /// Average of log(loss + eps) relative to the initial loss.
    Log,
    /// Average of loss relative to the initial loss (ablation).
    Linear,
}

/// Average log improvement over the initial loss: losses[0] is the
/// reference, the remaining entries are averaged.
pub fn meta_loss(losses: &[f64], epsilon: f64) -> f64 {
    assert!(losses.len() >= 2, "need a reference and at least one step");
    let reference = (losses[0].max(0.0) + epsilon).ln();
    let n = losses.len() - 1;
    losses[1..]
        .iter()
        .map(|&l| (l.max(0.0) + epsilon).ln() - reference)
        .sum::<f64>()
        / n as f64
}

/// Linear variant used by the objective ablation.
pub fn meta_loss_linear(losses: &[f64]) -> f64 {
    assert!(losses.len() >= 2);
    let n = losses.len() - 1;
    losses[1..].iter().map(|&l| l - losses[0]).sum::<f64>() / n as f64
}

/// Per-unroll meta-loss over post-update losses, on the tape.
fn unroll_meta_loss(
    tape: &mut Tape,
    reference_loss: f64,
    step_losses: &[Var],
    epsilon: f64,
    objective: MetaObjective,
) -> crate::AdResult<Var> {
    let n = step_losses.len();
    debug_assert!(n > 0);
    let mut acc: Option<Var> = None;
    for &l in step_losses {
        let term = match objective {
            MetaObjective::Log => {
                let pos = tape.clamp_min_const(l, 0.0)?;
                let shifted = tape.add_const(pos, epsilon)?;
                tape.log(shifted)?
            }
            MetaObjective::Linear => l,
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let mean = tape.scale(acc.expect("nonempty"), 1.0 / n as f64)?;
    let reference = match objective {
        MetaObjective::Log => (reference_loss.max(0.0) + epsilon).ln(),
        MetaObjective::Linear => reference_loss,
    };
    tape.add_const(mean, -reference)
}

/// Gradient with respect to every meta-parameter array, in the order of
/// `MetaParams::arrays`.
pub type MetaGradient = Vec<NdArray>;

/// Outcome of unrolling one problem under one schedule.
#[derive(Debug, Clone)]
pub struct MetaLossRecord {
    pub problem: String,
    pub schedule: UnrollSchedule,
    /// Loss at every visited iterate, including the initial one.
    pub step_losses: Vec<f64>,
    /// Sum of the per-unroll meta-objective values.
    pub meta_loss: f64,
    pub diverged: bool,
    /// Inner steps that contributed meta-objective terms.
    pub contributing_steps: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct UnrollOptions {
    pub epsilon: f64,
    pub objective: MetaObjective,
    /// Keep the gradient computation differentiable so meta-gradients
    /// include second-derivative terms. Off is the diagnostic mode.
    pub second_order: bool,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        UnrollOptions {
            epsilon: 1e-8,
            objective: MetaObjective::Log,
            second_order: true,
        }
    }
}

/// Unroll the learned optimizer over the schedule and backpropagate the
/// meta-objective to the meta-parameters. State carries across partial
/// unrolls by value; gradient flow is severed at unroll boundaries.
/// Divergence truncates the current unroll; gradients from completed steps
/// are still returned.
pub fn unroll_and_grad(
    meta: &MetaParams,
    problem: &Problem,
    schedule: &UnrollSchedule,
    seeds: &RunSeeds,
    opts: &UnrollOptions,
) -> RunResult<(MetaGradient, MetaLossRecord)> {
    run_unrolls(meta, problem, schedule, seeds, opts, true)
        .map(|(g, r)| (g.expect("gradient requested"), r))
}

/// Forward-only meta-loss under the identical sampling path; the oracle
/// side of finite-difference checks on the meta-gradient.
pub fn unroll_meta_loss_value(
    meta: &MetaParams,
    problem: &Problem,
    schedule: &UnrollSchedule,
    seeds: &RunSeeds,
    opts: &UnrollOptions,
) -> RunResult<MetaLossRecord> {
    run_unrolls(meta, problem, schedule, seeds, opts, false).map(|(_, r)| r)
}

fn run_unrolls(
    meta: &MetaParams,
    problem: &Problem,
    schedule: &UnrollSchedule,
    seeds: &RunSeeds,
    opts: &UnrollOptions,
    compute_grad: bool,
) -> RunResult<(Option<MetaGradient>, MetaLossRecord)> {
    assert!(
        !schedule.steps_per_unroll.is_empty()
            && schedule.steps_per_unroll.iter().all(|&k| k >= 1),
        "schedule must contain at least one unroll of at least one step"
    );
    let mut state = init_state(meta, problem, seeds);
    let mut data_rng = rng::rng_seeded(seeds.data);
    let mut noise_rng = rng::rng_seeded(seeds.noise);

    let mut grad_acc: Option<MetaGradient> = compute_grad.then(|| {
        meta.arrays()
            .iter()
            .map(|(_, a)| NdArray::zeros(a.shape()))
            .collect()
    });
    let mut record = MetaLossRecord {
        problem: problem.name().to_string(),
        schedule: schedule.clone(),
        step_losses: Vec::new(),
        meta_loss: 0.0,
        diverged: false,
        contributing_steps: 0,
    };
    let mut reference: Option<f64> = None;
    let mut tape = Tape::new();
    let mut first_unroll = true;

    for &k in &schedule.steps_per_unroll {
        tape.clear();
        let mv = MetaVars::import(&mut tape, meta);
        let mut st = if first_unroll && meta.flags.trainable_init {
            TapedState::import_trainable_init(
                &mut tape,
                &state,
                mv.init_h_param,
                mv.init_h_tensor,
                mv.init_h_global,
            )?
        } else {
            TapedState::import(&mut tape, &state)
        };
        first_unroll = false;

        let mut pre_losses: Vec<Var> = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let batch = if problem.has_sampler() {
                Some(problem.sample_minibatch(&mut data_rng)?)
            } else {
                None
            };
            match optimizer_step(
                &mut tape,
                &mv,
                &mut st,
                problem,
                batch.as_ref(),
                opts.second_order,
                &mut noise_rng,
            ) {
                Ok(loss) => {
                    let v = tape.value(loss).item();
                    if reference.is_none() {
                        reference = Some(v);
                    }
                    record.step_losses.push(v);
                    if !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD {
                        record.diverged = true;
                        break;
                    }
                    pre_losses.push(loss);
                }
                Err(RunError::Diverged { .. }) => {
                    record.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        // Post-update losses of this unroll: the pre-update losses of steps
        // 2..j, plus a final evaluation of the last iterate when the unroll
        // completed cleanly.
        let mut post: Vec<Var> = pre_losses.iter().skip(1).copied().collect();
        if !record.diverged {
            let batch = if problem.has_sampler() {
                Some(problem.sample_minibatch(&mut data_rng)?)
            } else {
                None
            };
            let thetas = st
                .tensors
                .iter()
                .zip(&st.shapes)
                .map(|(t, shape)| tape.reshape(t.theta, shape))
                .collect::<crate::AdResult<Vec<_>>>()?;
            let final_loss = problem.loss(&mut tape, &thetas, batch.as_ref())?;
            let v = tape.value(final_loss).item();
            record.step_losses.push(v);
            if !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD {
                record.diverged = true;
            } else {
                post.push(final_loss);
            }
        }

        if !post.is_empty() {
            let reference = reference.expect("reference set with first loss");
            let ml = unroll_meta_loss(&mut tape, reference, &post, opts.epsilon, opts.objective)?;
            record.meta_loss += tape.value(ml).item();
            record.contributing_steps += post.len() as u64;
            if let Some(acc) = grad_acc.as_mut() {
                let wrt = mv.ordered();
                let grads = tape.gradient(ml, &wrt, false)?;
                for (a, g) in acc.iter_mut().zip(grads) {
                    let gv = tape.value(g);
                    let ad = a.data_mut();
                    for (x, y) in ad.iter_mut().zip(gv.data()) {
                        *x += y;
                    }
                }
            }
        }

        state = st.export(&tape);
        if record.diverged {
            break;
        }
    }

    Ok((grad_acc, record))
}

/// RMSProp state for the meta-optimizer.
#[derive(Debug, Clone)]
pub struct MetaOptState {
    pub mean_square: Vec<NdArray>,
    pub learning_rate: f64,
    pub decay: f64,
}

const META_RMS_EPSILON: f64 = 1e-10;

impl MetaOptState {
    pub fn new(meta: &MetaParams, learning_rate: f64, decay: f64) -> MetaOptState {
        MetaOptState {
            mean_square: meta
                .arrays()
                .iter()
                .map(|(_, a)| NdArray::zeros(a.shape()))
                .collect(),
            learning_rate,
            decay,
        }
    }
}

/// One RMSProp update of the meta-parameters. The readout biases feeding
/// the direction channels are re-clamped to zero afterwards.
pub fn meta_update(meta: &mut MetaParams, gradient: &MetaGradient, opt: &mut MetaOptState) {
    let lr = opt.learning_rate;
    let d = opt.decay;
    for ((_, arr), (ms, g)) in meta
        .arrays_mut()
        .into_iter()
        .zip(opt.mean_square.iter_mut().zip(gradient))
    {
        let msd = ms.data_mut();
        let ad = arr.data_mut();
        for i in 0..ad.len() {
            let gi = g.data()[i];
            msd[i] = d * msd[i] + (1.0 - d) * gi * gi;
            ad[i] -= lr * gi / (msd[i].sqrt() + META_RMS_EPSILON);
        }
    }
    meta.clamp_readout_bias();
}
