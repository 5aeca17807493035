//! Sweep learning rates (or init-learning-rate draws for the learned
//! optimizer) and tabulate the final losses.

use crate::checkpoint;
use crate::csvio::{fmt_f64, log10_loss, Csv};
use crate::problem_args::ProblemArgs;
use anyhow::{bail, Context, Result};
use clap::Args;
use lopt_core::baselines::{lr_sweep, BaselineConfig};
use lopt_core::optimizer::RunSeeds;
use lopt_core::runner::run_learned;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct LrSweepArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// learned | adam | rmsprop | sgd_momentum
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Learning rates to sweep. For the learned optimizer these pin the
    /// init-learning-rate draw.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub struct SweepRow {
    pub lr: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

pub fn execute(args: &LrSweepArgs) -> Result<Vec<SweepRow>> {
    if args.lrs.is_empty() {
        bail!("lr list must not be empty");
    }
    let problem = args.problem.build()?;
    let rows = match args.optimizer.as_str() {
        "learned" => {
            let path = args
                .checkpoint
                .as_ref()
                .context("--optimizer learned needs --checkpoint")?;
            let meta = checkpoint::load(path)?;
            let seeds = RunSeeds::from_master(args.seed);
            args.lrs
                .iter()
                .map(|&lr| {
                    let out = run_learned(&problem, &meta, args.steps, &seeds, Some(lr), false)?;
                    Ok(SweepRow {
                        lr,
                        final_loss: if out.diverged {
                            f64::INFINITY
                        } else {
                            out.final_loss()
                        },
                        diverged: out.diverged,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        kind => {
            let template = match kind {
                "adam" => BaselineConfig::adam(1.0),
                "rmsprop" => BaselineConfig::rmsprop(1.0),
                "sgd_momentum" => BaselineConfig::sgd_momentum(1.0, args.momentum),
                other => bail!("unknown optimizer '{other}'"),
            };
            lr_sweep(&problem, &template, &args.lrs, args.steps, args.seed)?
                .into_iter()
                .map(|e| SweepRow {
                    lr: e.learning_rate,
                    final_loss: e.final_loss,
                    diverged: e.diverged,
                })
                .collect()
        }
    };
    Ok(rows)
}

pub fn run(args: &LrSweepArgs) -> Result<i32> {
    if let Some(out) = &args.out {
        checkpoint::check_writable(out)?;
    }
    let rows = execute(args)?;
    let mut csv = Csv::new(&["learning_rate", "final_loss", "log10_final_loss", "diverged"]);
    for r in &rows {
        csv.row(&[
            fmt_f64(r.lr),
            fmt_f64(r.final_loss),
            fmt_f64(log10_loss(r.final_loss)),
            (r.diverged as u8).to_string(),
        ]);
    }
    if let Some(out) = &args.out {
        csv.write(out)?;
    }
    let finite: Vec<f64> = rows
        .iter()
        .map(|r| r.final_loss)
        .filter(|l| l.is_finite() && *l > 0.0)
        .collect();
    if let (Some(max), Some(min)) = (
        finite.iter().cloned().reduce(f64::max),
        finite.iter().cloned().reduce(f64::min),
    ) {
        println!(
            "{} over {} rates: final-loss spread {} decades (best {}, worst {})",
            args.optimizer,
            rows.len(),
            fmt_f64((max / min).log10()),
            fmt_f64(min),
            fmt_f64(max)
        );
    }
    Ok(0)
}
