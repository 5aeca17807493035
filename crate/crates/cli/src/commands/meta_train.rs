//! Meta-train the optimizer over a corpus and write a checkpoint plus a
//! meta-loss log.

use crate::checkpoint::{self, ResumeState};
use crate::csvio::{fmt_f64, Csv};
use crate::flag_sets::{apply_modifier, FlagSet};
use crate::problem_args::parse_corpus_entry;
use anyhow::{bail, Context, Result};
use clap::Args;
use lopt_core::meta::{
    meta_train, MetaEvent, MetaTrainConfig, ScheduleParams, UnrollOptions,
};
use lopt_core::optimizer::{MetaParams, Sizes};
use lopt_core::rng::derive_seed;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct MetaTrainArgs {
    /// Corpus entries: family or family:dim, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub corpus: Vec<String>,
    /// Meta-iterations to run (total, not per worker).
    #[arg(long, default_value_t = 1000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// sync: barrier per iteration, averaged gradients, bit-reproducible.
    /// async: lock per update, reproducible only for one worker.
    #[arg(long, default_value = "sync")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Feature modifiers, e.g. no-attention,first-order.
    #[arg(long, value_delimiter = ',')]
    pub flags: Vec<String>,
    /// Momentum timescales S.
    #[arg(long, default_value_t = 3)]
    pub timescales: usize,
    #[arg(long, default_value_t = 10)]
    pub k_param: usize,
    #[arg(long, default_value_t = 20)]
    pub k_tensor: usize,
    #[arg(long, default_value_t = 20)]
    pub k_global: usize,
    /// Meta RMSProp learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub meta_lr: f64,
    /// Meta RMSProp mean-square decay (0.999 variant available too).
    #[arg(long, default_value_t = 0.9)]
    pub meta_decay: f64,
    /// Epsilon inside the log meta-objective.
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Unroll-count distribution: offset + Exp(scale), rounded.
    #[arg(long, default_value_t = 50.0)]
    pub scale_unrolls: f64,
    #[arg(long, default_value_t = 1)]
    pub offset_unrolls: u64,
    /// Steps-per-unroll distribution: offset + Exp(scale), rounded.
    #[arg(long, default_value_t = 200.0)]
    pub scale_steps: f64,
    #[arg(long, default_value_t = 50)]
    pub offset_steps: u64,
    /// Checkpoint file to write.
    #[arg(long, required = true)]
    pub out: PathBuf,
    /// Meta-loss log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Save a checkpoint every N iterations (0 = final only, sync mode).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Resume from this checkpoint (expects its .state sidecar).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Record wall-clock times in the log (off keeps output reproducible).
    #[arg(long, default_value_t = false)]
    pub timing: bool,
}

pub fn run(args: &MetaTrainArgs) -> Result<i32> {
    let sync = match args.mode.as_str() {
        "sync" => true,
        "async" => false,
        other => bail!("mode must be sync or async, got '{other}'"),
    };
    let corpus = args
        .corpus
        .iter()
        .map(|e| parse_corpus_entry(e))
        .collect::<Result<Vec<_>>>()?;

    let mut set = FlagSet::default();
    for m in &args.flags {
        apply_modifier(&mut set, m)?;
    }
    set.flags.timescales = args.timescales;
    let sizes = Sizes {
        k_param: args.k_param,
        k_tensor: args.k_tensor,
        k_global: args.k_global,
    };

    checkpoint::check_writable(&args.out)?;
    let sidecar = checkpoint::sidecar_path(&args.out);
    checkpoint::check_writable(&sidecar)?;
    if let Some(log) = &args.log {
        checkpoint::check_writable(log)?;
    }

    let (meta, opt, start_iter, start_avg) = match &args.resume {
        Some(path) => {
            let meta = checkpoint::load(path)?;
            let state = checkpoint::load_state(&checkpoint::sidecar_path(path), &meta)
                .context("resume needs the checkpoint's .state sidecar")?;
            if meta.flags != set.flags || meta.sizes != sizes {
                eprintln!(
                    "note: architecture flags come from the resumed checkpoint; command-line values ignored"
                );
            }
            (meta, Some(state.opt), state.iteration, state.moving_avg)
        }
        None => {
            let meta = MetaParams::init(set.flags, sizes, derive_seed(args.seed, 0x11117, 0));
            (meta, None, 0, None)
        }
    };

    let config = MetaTrainConfig {
        corpus,
        iterations: args.iterations,
        workers: args.workers,
        sync,
        seed: args.seed,
        schedule: ScheduleParams {
            scale_unrolls: args.scale_unrolls,
            offset_unrolls: args.offset_unrolls,
            scale_steps: args.scale_steps,
            offset_steps: args.offset_steps,
        },
        unroll: UnrollOptions {
            epsilon: args.epsilon,
            objective: set.objective,
            second_order: set.second_order,
        },
        meta_lr: args.meta_lr,
        meta_decay: args.meta_decay,
        checkpoint_every: args.checkpoint_every,
        identical_worker_seeds: false,
        timing: args.timing,
    };

    let mut csv = Csv::new(&[
        "meta_iteration",
        "problem_name",
        "meta_loss",
        "moving_avg_meta_loss",
        "wall_ms",
    ]);
    let out_path = args.out.clone();
    let log_path = args.log.clone();
    let mut observer = |event: MetaEvent<'_>| match event {
        MetaEvent::Log(r) => {
            csv.row(&[
                r.iteration.to_string(),
                r.problem.clone(),
                fmt_f64(r.meta_loss),
                fmt_f64(r.moving_avg_meta_loss),
                fmt_f64(r.wall_ms),
            ]);
        }
        MetaEvent::Checkpoint {
            iteration,
            meta,
            opt,
            moving_avg,
        } => {
            let state = ResumeState {
                iteration,
                moving_avg,
                opt: opt.clone(),
            };
            if let Err(e) = checkpoint::save(&out_path, meta)
                .and_then(|_| checkpoint::save_state(&sidecar, meta, &state))
            {
                eprintln!("warning: checkpoint at iteration {iteration} failed: {e:#}");
            }
            if let Some(log) = &log_path {
                if let Err(e) = csv.write(log) {
                    eprintln!("warning: log write failed: {e:#}");
                }
            }
        }
    };

    let (final_meta, final_opt, logs) =
        meta_train(&config, meta, opt, start_iter, start_avg, &mut observer)?;
    drop(observer);

    checkpoint::save(&args.out, &final_meta)?;
    checkpoint::save_state(
        &sidecar,
        &final_meta,
        &ResumeState {
            iteration: args.iterations,
            moving_avg: logs.last().map(|r| r.moving_avg_meta_loss),
            opt: final_opt,
        },
    )?;
    if let Some(log) = &args.log {
        csv.write(log)?;
    }
    let last_avg = logs.last().map(|r| r.moving_avg_meta_loss);
    println!(
        "meta-train: {} iterations, {} workers ({}), final moving-average meta-loss {}",
        args.iterations,
        args.workers,
        args.mode,
        last_avg.map(fmt_f64).unwrap_or_else(|| "n/a".into())
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(0)
}
