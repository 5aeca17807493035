//! Run one optimizer on one problem and write the loss curve.

use crate::checkpoint;
use crate::csvio::{fmt_f64, log10_loss, Csv};
use crate::problem_args::ProblemArgs;
use anyhow::{bail, Context, Result};
use clap::Args;
use lopt_core::baselines::BaselineConfig;
use lopt_core::optimizer::RunSeeds;
use lopt_core::runner::{run_baseline, run_learned, RunOutcome};
use std::path::PathBuf;

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_COMPLETED: i32 = 10;
pub const EXIT_DIVERGED: i32 = 20;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// learned | adam | rmsprop | sgd_momentum
    #[arg(long, default_value = "learned")]
    pub optimizer: String,
    /// Checkpoint path (learned optimizer).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Baseline learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Momentum for sgd_momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Pin the learned optimizer's initial learning rate instead of
    /// drawing it from the run seed.
    #[arg(long)]
    pub init_lr: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    /// Run seed (initial point, data order, init-lr draw).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Curve CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Final loss at or below this counts as converged (exit 0).
    #[arg(long, default_value_t = 1e-10)]
    pub converge_tol: f64,
    /// Record wall-clock times (off keeps CSV bytes reproducible).
    #[arg(long, default_value_t = false)]
    pub timing: bool,
}

pub fn execute(args: &TrainArgs) -> Result<(RunOutcome, String)> {
    let problem = args.problem.build()?;
    let seeds = RunSeeds::from_master(args.seed);
    let outcome = match args.optimizer.as_str() {
        "learned" => {
            let path = args
                .checkpoint
                .as_ref()
                .context("--optimizer learned needs --checkpoint")?;
            let meta = checkpoint::load(path)?;
            run_learned(&problem, &meta, args.steps, &seeds, args.init_lr, args.timing)?
        }
        "adam" => run_baseline(&problem, &BaselineConfig::adam(args.lr), args.steps, &seeds)?,
        "rmsprop" => run_baseline(&problem, &BaselineConfig::rmsprop(args.lr), args.steps, &seeds)?,
        "sgd_momentum" => run_baseline(
            &problem,
            &BaselineConfig::sgd_momentum(args.lr, args.momentum),
            args.steps,
            &seeds,
        )?,
        other => bail!("unknown optimizer '{other}'"),
    };
    Ok((outcome, problem.name().to_string()))
}

pub fn curve_csv(outcome: &RunOutcome) -> Csv {
    let mut csv = Csv::new(&["step", "loss", "log10_loss", "mean_log_lr", "wall_ms"]);
    for (i, &loss) in outcome.losses.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            fmt_f64(loss),
            fmt_f64(log10_loss(loss)),
            fmt_f64(outcome.mean_log_lrs[i]),
            fmt_f64(outcome.wall_ms[i]),
        ]);
    }
    csv
}

pub fn run(args: &TrainArgs) -> Result<i32> {
    if let Some(out) = &args.out {
        checkpoint::check_writable(out)?;
    }
    let (outcome, name) = execute(args)?;
    if let Some(out) = &args.out {
        curve_csv(&outcome).write(out)?;
    }
    let final_loss = outcome.final_loss();
    let status = if outcome.diverged {
        "diverged"
    } else if final_loss <= args.converge_tol {
        "converged"
    } else {
        "completed"
    };
    println!(
        "{} on {}: {} after {} steps, final loss {}",
        args.optimizer,
        name,
        status,
        outcome.losses.len().saturating_sub(1),
        fmt_f64(final_loss)
    );
    Ok(match status {
        "converged" => EXIT_CONVERGED,
        "completed" => EXIT_COMPLETED,
        _ => EXIT_DIVERGED,
    })
}
