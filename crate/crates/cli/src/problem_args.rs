//! Problem construction shared by the run-style commands.

use anyhow::{bail, Context, Result};
use clap::Args;
use lopt_core::problems::{
    instantiate, mlp_problem, synthetic_mlp, Family, Problem, ProblemSpec, TransformSpec,
};
use std::path::PathBuf;

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Corpus family name, or "synthetic_mlp" / "mnist_mlp".
    #[arg(long)]
    pub problem: String,
    /// Problem dimension (family default when omitted).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Instantiation seed (parameters, coupling matrices, data).
    #[arg(long, default_value_t = 0)]
    pub problem_seed: u64,
    /// Transformations, in order: sparse_gradient[:keep], rescale,
    /// monotonic[:power], multi_task:famA+famB.
    #[arg(long, value_delimiter = ',')]
    pub transform: Vec<String>,
    /// Minibatch size for data-sampling families (10..=200).
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Loss-noise standard deviation for noisy full-batch problems.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Directory holding MNIST IDX files (mnist_mlp only).
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Hidden width for the MLP problems.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Input width for synthetic_mlp.
    #[arg(long, default_value_t = 32)]
    pub input_dim: usize,
    /// Class count for synthetic_mlp.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Minibatch size for the MLP problems.
    #[arg(long, default_value_t = 64)]
    pub mlp_batch: usize,
}

pub fn parse_transform(text: &str) -> Result<TransformSpec> {
    let (kind, arg) = match text.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (text, None),
    };
    Ok(match kind {
        "sparse_gradient" | "sparse" => TransformSpec::SparseGradient {
            keep_fraction: arg.map(|a| a.parse()).transpose()?,
        },
        "rescale" | "rescale_variables" => TransformSpec::RescaleVariables,
        "monotonic" | "monotonic_loss" => TransformSpec::MonotonicLoss {
            power: arg.map(|a| a.parse()).transpose()?,
        },
        "multi_task" => {
            let Some(list) = arg else {
                bail!("multi_task needs families, e.g. multi_task:rosenbrock+booth");
            };
            let families = list
                .split('+')
                .map(Family::from_name)
                .collect::<Result<Vec<_>, _>>()?;
            TransformSpec::MultiTask { families }
        }
        other => bail!("unknown transformation '{other}'"),
    })
}

/// Parse "family", "family:dim", or "family:dim:seed", with optional
/// "+transform" suffixes, e.g. "quadratic_bowl:8+rescale".
pub fn parse_corpus_entry(text: &str) -> Result<ProblemSpec> {
    let mut pieces = text.split('+');
    let head = pieces.next().expect("split yields at least one piece");
    let parts: Vec<&str> = head.split(':').collect();
    let family = Family::from_name(parts[0])?;
    let mut spec = ProblemSpec::new(family);
    if parts.len() > 1 && !parts[1].is_empty() {
        spec.dim = Some(parts[1].parse().context("dimension")?);
    }
    if parts.len() > 2 {
        spec.seed = parts[2].parse().context("seed")?;
    }
    if parts.len() > 3 {
        bail!("too many ':' fields in '{text}'");
    }
    spec.transforms = pieces.map(parse_transform).collect::<Result<Vec<_>>>()?;
    Ok(spec)
}

impl ProblemArgs {
    pub fn build(&self) -> Result<Problem> {
        match self.problem.as_str() {
            "synthetic_mlp" => Ok(synthetic_mlp(
                self.input_dim,
                self.hidden,
                self.classes,
                self.mlp_batch,
                self.problem_seed,
            )),
            "mnist_mlp" => {
                let dir = self
                    .mnist_dir
                    .as_ref()
                    .context("mnist_mlp needs --mnist-dir")?;
                let (x, y) = crate::mnist::load_pairs(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let pixels = x.shape()[1];
                Ok(mlp_problem(
                    "mnist_mlp",
                    pixels,
                    self.hidden,
                    10,
                    x,
                    y,
                    self.mlp_batch,
                ))
            }
            name => {
                let family = Family::from_name(name)?;
                let mut spec = ProblemSpec::new(family).with_seed(self.problem_seed);
                spec.dim = self.dim;
                spec.minibatch = self.minibatch;
                spec.noise_std = self.noise_std;
                spec.transforms = self
                    .transform
                    .iter()
                    .map(|t| parse_transform(t))
                    .collect::<Result<Vec<_>>>()?;
                Ok(instantiate(&spec)?)
            }
        }
    }
}
