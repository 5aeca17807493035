//! Per-step overhead of the learned optimizer across minibatch sizes,
//! against the cost of the loss/gradient work alone and a full adam step.

use crate::checkpoint;
use crate::csvio::{fmt_f64, Csv};
use anyhow::Result;
use clap::Args;
use lopt_core::baselines::{baseline_step, problem_gradient, BaselineConfig, BaselineSlots};
use lopt_core::optimizer::{
    init_state_with, optimizer_step, FeatureFlags, MetaParams, MetaVars, Sizes, TapedState,
};
use lopt_core::problems::{synthetic_mlp, Problem};
use lopt_core::rng::rng_seeded;
use lopt_core::tape::Tape;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Minibatch sizes to measure.
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 128, 512, 1024])]
    pub batch_sizes: Vec<usize>,
    /// Repetitions per measurement (after warmup); medians are reported.
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Fully-connected problem geometry.
    #[arg(long, default_value_t = 32)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Checkpoint to time (a default-initialized optimizer otherwise).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub struct BenchRow {
    pub batch_size: usize,
    pub loss_grad_ms: f64,
    pub learned_ms: f64,
    pub adam_ms: f64,
}

impl BenchRow {
    pub fn overhead_ms(&self) -> f64 {
        self.learned_ms - self.loss_grad_ms
    }

    pub fn ratio(&self) -> f64 {
        self.learned_ms / self.adam_ms
    }
}

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time the learned step's loss-and-gradient work alone: loss at the
/// iterate, loss at the attended point, and the gradient, on a tape.
fn time_loss_grad(problem: &Problem, meta: &MetaParams, args: &BenchArgs) -> Result<f64> {
    let mut prng = rng_seeded(args.seed);
    let theta0 = problem.init_params(&mut prng);
    let state = init_state_with(meta, theta0, 1e-3, 0);
    let mut drng = rng_seeded(args.seed ^ 1);
    let mut tape = Tape::new();
    let mut times = Vec::with_capacity(args.reps);
    for rep in 0..args.warmup + args.reps {
        let batch = problem.sample_minibatch(&mut drng)?;
        let start = Instant::now();
        tape.clear();
        let st = TapedState::import(&mut tape, &state);
        let thetas: Vec<_> = st
            .tensors
            .iter()
            .zip(&st.shapes)
            .map(|(t, s)| tape.reshape(t.theta, s))
            .collect::<Result<Vec<_>, _>>()?;
        let _l_theta = problem.loss(&mut tape, &thetas, Some(&batch))?;
        let phis: Vec<_> = st
            .tensors
            .iter()
            .zip(&st.shapes)
            .map(|(t, s)| tape.reshape(t.phi, s))
            .collect::<Result<Vec<_>, _>>()?;
        let l_phi = problem.loss(&mut tape, &phis, Some(&batch))?;
        let wrt: Vec<_> = st.tensors.iter().map(|t| t.phi).collect();
        let _g = tape.gradient(l_phi, &wrt, false)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if rep >= args.warmup {
            times.push(elapsed);
        }
    }
    Ok(median_of(times))
}

fn time_learned_step(problem: &Problem, meta: &MetaParams, args: &BenchArgs) -> Result<f64> {
    let mut prng = rng_seeded(args.seed);
    let theta0 = problem.init_params(&mut prng);
    let mut state = init_state_with(meta, theta0, 1e-3, 0);
    let mut drng = rng_seeded(args.seed ^ 1);
    let mut nrng = rng_seeded(args.seed ^ 2);
    let mut tape = Tape::new();
    let mut times = Vec::with_capacity(args.reps);
    for rep in 0..args.warmup + args.reps {
        let batch = problem.sample_minibatch(&mut drng)?;
        let start = Instant::now();
        tape.clear();
        let mv = MetaVars::import(&mut tape, meta);
        let mut st = TapedState::import(&mut tape, &state);
        optimizer_step(&mut tape, &mv, &mut st, problem, Some(&batch), false, &mut nrng)?;
        state = st.export(&tape);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if rep >= args.warmup {
            times.push(elapsed);
        }
    }
    Ok(median_of(times))
}

fn time_adam_step(problem: &Problem, args: &BenchArgs) -> Result<f64> {
    let mut prng = rng_seeded(args.seed);
    let mut theta = problem.init_params(&mut prng);
    let mut drng = rng_seeded(args.seed ^ 1);
    let config = BaselineConfig::adam(1e-3);
    let mut slots = BaselineSlots::zeros(problem.param_shapes());
    let mut times = Vec::with_capacity(args.reps);
    for rep in 0..args.warmup + args.reps {
        let batch = problem.sample_minibatch(&mut drng)?;
        let start = Instant::now();
        let (_, grads) = problem_gradient(problem, &theta, Some(&batch))?;
        baseline_step(&config, &mut slots, &mut theta, &grads);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if rep >= args.warmup {
            times.push(elapsed);
        }
    }
    Ok(median_of(times))
}

pub fn execute(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let meta = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => MetaParams::init(FeatureFlags::default(), Sizes::default(), args.seed),
    };
    let mut rows = Vec::new();
    for &b in &args.batch_sizes {
        let problem = synthetic_mlp(args.input_dim, args.hidden, args.classes, b, args.seed);
        rows.push(BenchRow {
            batch_size: b,
            loss_grad_ms: time_loss_grad(&problem, &meta, args)?,
            learned_ms: time_learned_step(&problem, &meta, args)?,
            adam_ms: time_adam_step(&problem, args)?,
        });
    }
    Ok(rows)
}

pub fn run(args: &BenchArgs) -> Result<i32> {
    if let Some(out) = &args.out {
        checkpoint::check_writable(out)?;
    }
    let rows = execute(args)?;
    let mut csv = Csv::new(&[
        "batch_size",
        "loss_grad_ms",
        "learned_step_ms",
        "adam_step_ms",
        "learned_overhead_ms",
        "learned_adam_ratio",
    ]);
    println!("batch  loss+grad  learned   adam      overhead  ratio");
    for r in &rows {
        csv.row(&[
            r.batch_size.to_string(),
            fmt_f64(r.loss_grad_ms),
            fmt_f64(r.learned_ms),
            fmt_f64(r.adam_ms),
            fmt_f64(r.overhead_ms()),
            fmt_f64(r.ratio()),
        ]);
        println!(
            "{:<6} {:<10.4} {:<9.4} {:<9.4} {:<9.4} {:.3}",
            r.batch_size,
            r.loss_grad_ms,
            r.learned_ms,
            r.adam_ms,
            r.overhead_ms(),
            r.ratio()
        );
    }
    if let Some(out) = &args.out {
        csv.write(out)?;
    }
    Ok(0)
}
