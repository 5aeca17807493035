//! Meta-train one optimizer per feature configuration and compare them on
//! a shared evaluation set.

use crate::checkpoint;
use crate::csvio::{fmt_f64, log10_loss, Csv};
use crate::flag_sets::parse_flag_set;
use crate::problem_args::parse_corpus_entry;
use anyhow::{bail, Result};
use clap::Args;
use lopt_core::meta::{meta_train, MetaTrainConfig, ScheduleParams, UnrollOptions};
use lopt_core::optimizer::{MetaParams, RunSeeds, Sizes};
use lopt_core::problems::instantiate;
use lopt_core::rng::derive_seed;
use lopt_core::runner::run_learned;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Flag sets to compare; "+" composes modifiers within one set.
    #[arg(long, value_delimiter = ',', required = true)]
    pub flag_sets: Vec<String>,
    /// Meta-training corpus entries (family or family:dim).
    #[arg(long, value_delimiter = ',', required = true)]
    pub corpus: Vec<String>,
    /// Meta-iterations per flag set.
    #[arg(long, default_value_t = 2000)]
    pub budget: u64,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Evaluation problems (family or family:dim:seed).
    #[arg(long, value_delimiter = ',', required = true)]
    pub eval_problems: Vec<String>,
    /// Evaluation run seeds per problem.
    #[arg(long, default_value_t = 5)]
    pub eval_seeds: u64,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Pre-trained checkpoints aligned with --flag-sets (skips training).
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub timescales: usize,
    #[arg(long, default_value_t = 10)]
    pub k_param: usize,
    #[arg(long, default_value_t = 20)]
    pub k_tensor: usize,
    #[arg(long, default_value_t = 20)]
    pub k_global: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub meta_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub meta_decay: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    pub scale_unrolls: f64,
    #[arg(long, default_value_t = 1)]
    pub offset_unrolls: u64,
    #[arg(long, default_value_t = 25.0)]
    pub scale_steps: f64,
    #[arg(long, default_value_t = 8)]
    pub offset_steps: u64,
    /// Save each flag set's checkpoint as <out>.<flag_set>.ckpt.
    #[arg(long, default_value_t = false)]
    pub save_checkpoints: bool,
    #[arg(long, required = true)]
    pub out: PathBuf,
}

pub struct AblateRow {
    pub flag_set: String,
    pub problem: String,
    pub eval_seed: u64,
    pub final_loss: f64,
}

pub fn execute(args: &AblateArgs, quiet: bool) -> Result<Vec<AblateRow>> {
    if !args.checkpoints.is_empty() && args.checkpoints.len() != args.flag_sets.len() {
        bail!(
            "{} checkpoints for {} flag sets",
            args.checkpoints.len(),
            args.flag_sets.len()
        );
    }
    let corpus = args
        .corpus
        .iter()
        .map(|e| parse_corpus_entry(e))
        .collect::<Result<Vec<_>>>()?;
    let eval_specs = args
        .eval_problems
        .iter()
        .map(|e| parse_corpus_entry(e))
        .collect::<Result<Vec<_>>>()?;
    let sizes = Sizes {
        k_param: args.k_param,
        k_tensor: args.k_tensor,
        k_global: args.k_global,
    };

    let mut rows = Vec::new();
    for (si, label) in args.flag_sets.iter().enumerate() {
        let mut set = parse_flag_set(label)?;
        set.flags.timescales = args.timescales;
        let meta = if let Some(path) = args.checkpoints.get(si) {
            checkpoint::load(path)?
        } else {
            if !quiet {
                eprintln!("[ablate] meta-training '{label}' for {} iterations", args.budget);
            }
            let init = MetaParams::init(set.flags, sizes, derive_seed(args.seed, 0x11117, 0));
            let config = MetaTrainConfig {
                corpus: corpus.clone(),
                iterations: args.budget,
                workers: args.workers,
                sync: true,
                // same base seed for every set: identical problem sequences
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
                checkpoint_every: 0,
                identical_worker_seeds: false,
                timing: false,
            };
            let (meta, _, _) = meta_train(&config, init, None, 0, None, &mut |_| {})?;
            if args.save_checkpoints {
                let path = args.out.with_extension(format!("{}.ckpt", label.replace('+', "_")));
                checkpoint::save(&path, &meta)?;
            }
            meta
        };

        for spec in &eval_specs {
            let problem = instantiate(spec)?;
            for es in 0..args.eval_seeds {
                let run_seed = derive_seed(args.seed, 0xeba1, es);
                let out = run_learned(
                    &problem,
                    &meta,
                    args.steps,
                    &RunSeeds::from_master(run_seed),
                    None,
                    false,
                )?;
                rows.push(AblateRow {
                    flag_set: label.clone(),
                    problem: problem.name().to_string(),
                    eval_seed: es,
                    final_loss: if out.diverged {
                        f64::INFINITY
                    } else {
                        out.final_loss()
                    },
                });
            }
        }
    }
    Ok(rows)
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn run(args: &AblateArgs) -> Result<i32> {
    checkpoint::check_writable(&args.out)?;
    let rows = execute(args, false)?;
    let mut csv = Csv::new(&["flag_set", "problem", "eval_seed", "final_loss", "log10_final_loss"]);
    for r in &rows {
        csv.row(&[
            r.flag_set.clone(),
            r.problem.clone(),
            r.eval_seed.to_string(),
            fmt_f64(r.final_loss),
            fmt_f64(log10_loss(r.final_loss)),
        ]);
    }
    csv.write(&args.out)?;

    // median log-loss per (flag set, problem)
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let key = (r.flag_set.clone(), r.problem.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    println!("flag_set, problem, median_log10_final_loss");
    for (label, problem) in keys {
        let mut vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.flag_set == label && r.problem == problem)
            .map(|r| log10_loss(r.final_loss))
            .collect();
        println!("{label}, {problem}, {}", fmt_f64(median(&mut vals)));
    }
    Ok(0)
}
