use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use lopt_cli::commands;
use lopt_cli::config;

/// Hierarchical RNN learned optimizer: meta-train it on a corpus of small
/// problems, run it against tuned baselines, and reproduce the scaling and
/// robustness studies.
#[derive(Parser)]
#[command(name = "lopt", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the meta-training problem corpus.
    Problems,
    /// Meta-train the optimizer and write a checkpoint.
    MetaTrain(commands::meta_train::MetaTrainArgs),
    /// Run one optimizer on one problem and write the loss curve.
    /// Exit status: 0 converged, 10 completed, 20 diverged.
    Train(commands::train::TrainArgs),
    /// Sweep learning rates and tabulate final losses.
    LrSweep(commands::lr_sweep::LrSweepArgs),
    /// Compare feature configurations after equal meta-training budgets.
    Ablate(commands::ablate::AblateArgs),
    /// Measure per-step overhead across minibatch sizes.
    BenchOverhead(commands::bench::BenchArgs),
}

/// Expand `--config FILE` into flags, validated against the subcommand.
/// File values come first, so explicit command-line flags win for
/// single-valued options and append for list-valued ones.
fn expand_config(raw: Vec<String>) -> Result<Vec<String>> {
    let Some(sub_pos) = raw.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Ok(raw);
    };
    let sub_pos = sub_pos + 1;
    let sub_name = raw[sub_pos].clone();

    let mut rest: Vec<String> = Vec::new();
    let mut config_path: Option<String> = None;
    let mut it = raw[sub_pos + 1..].iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config_path = Some(
                it.next()
                    .context("--config needs a file path")?
                    .clone(),
            );
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = config_path else {
        return Ok(raw);
    };

    let cmd = Cli::command();
    let sub = cmd
        .get_subcommands()
        .find(|s| s.get_name() == sub_name)
        .with_context(|| format!("unknown subcommand '{sub_name}'"))?;
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| l.to_string()))
        .collect();
    let entries = config::load(std::path::Path::new(&path))?;
    let injected = config::to_args(&entries, &known)?;

    // drop file-supplied single-value flags that the command line repeats
    let explicit: Vec<&String> = rest.iter().filter(|a| a.starts_with("--")).collect();
    let list_flags: Vec<String> = sub
        .get_arguments()
        .filter(|a| matches!(a.get_action(), clap::ArgAction::Append))
        .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
        .collect();
    let mut filtered = Vec::new();
    let mut inj = injected.into_iter();
    while let Some(flag) = inj.next() {
        let value = inj.next().unwrap_or_default();
        let overridden =
            explicit.iter().any(|e| **e == flag) && !list_flags.contains(&flag);
        if !overridden {
            filtered.push(flag);
            filtered.push(value);
        }
    }

    let mut out = raw[..=sub_pos].to_vec();
    out.extend(filtered);
    out.extend(rest);
    Ok(out)
}

fn main() {
    let raw: Vec<String> = std::env::args().collect();
    let args = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let cli = Cli::parse_from(args);
    let result = match &cli.command {
        Command::Problems => commands::problems::run(),
        Command::MetaTrain(a) => commands::meta_train::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::LrSweep(a) => commands::lr_sweep::run(a),
        Command::Ablate(a) => commands::ablate::run(a),
        Command::BenchOverhead(a) => commands::bench::run(a),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
