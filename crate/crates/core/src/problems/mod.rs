//! The meta-training problem corpus: small differentiable target tasks with
//! diverse loss-landscape pathologies, plus transformation wrappers.
//!
//! Every family instantiates deterministically from a seed. Where the
//! standard form of a function has a nonzero minimum, a constant offset is
//! subtracted so the global minimum is zero.

pub mod functions;
pub mod transforms;

use crate::error::{ProblemError, ProblemResult};
use crate::ndarray::NdArray;
use crate::rng;
use crate::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

const STREAM_INSTANTIATE: u64 = 0x7015_3a11;

/// Corpus families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Rosenbrock,
    Ackley,
    Beale,
    Booth,
    StyblinskiTang,
    Matyas,
    Branin,
    Michalewicz,
    LogSumExp,
    QuadraticBowl,
    LogisticRegression,
    MinibatchQuadratic,
    NoisyFullbatch,
    OscillatingValley,
    CoupledChain,
    MinMax,
}

impl Family {
    pub const ALL: [Family; 16] = [
        Family::Rosenbrock,
        Family::Ackley,
        Family::Beale,
        Family::Booth,
        Family::StyblinskiTang,
        Family::Matyas,
        Family::Branin,
        Family::Michalewicz,
        Family::LogSumExp,
        Family::QuadraticBowl,
        Family::LogisticRegression,
        Family::MinibatchQuadratic,
        Family::NoisyFullbatch,
        Family::OscillatingValley,
        Family::CoupledChain,
        Family::MinMax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Rosenbrock => "rosenbrock",
            Family::Ackley => "ackley",
            Family::Beale => "beale",
            Family::Booth => "booth",
            Family::StyblinskiTang => "styblinski_tang",
            Family::Matyas => "matyas",
            Family::Branin => "branin",
            Family::Michalewicz => "michalewicz",
            Family::LogSumExp => "log_sum_exp",
            Family::QuadraticBowl => "quadratic_bowl",
            Family::LogisticRegression => "logistic_regression",
            Family::MinibatchQuadratic => "minibatch_quadratic",
            Family::NoisyFullbatch => "noisy_fullbatch",
            Family::OscillatingValley => "oscillating_valley",
            Family::CoupledChain => "coupled_chain",
            Family::MinMax => "min_max",
        }
    }

    pub fn from_name(name: &str) -> ProblemResult<Family> {
        Family::ALL
            .iter()
            .find(|f| f.name() == name)
            .copied()
            .ok_or_else(|| ProblemError::UnknownFamily {
                name: name.to_string(),
                known: Family::ALL
                    .iter()
                    .map(|f| f.name())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Transformation selector carried by a [`ProblemSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum TransformSpec {
    /// Zero out most gradient entries each step; keep this fraction
    /// (drawn from {0.01, 0.05, 0.1, 0.25} when unset).
    SparseGradient { keep_fraction: Option<f64> },
    /// Diagonal change of variables with entries log-uniform in [1e-2, 1e2].
    RescaleVariables,
    /// Raise the loss to a power (drawn from {0.5, 2, 3} when unset).
    MonotonicLoss { power: Option<f64> },
    /// Sum losses and concatenate parameters with these extra families.
    MultiTask { families: Vec<Family> },
}

/// A reproducible recipe for one corpus problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub family: Family,
    pub dim: Option<usize>,
    pub seed: u64,
    pub transforms: Vec<TransformSpec>,
    pub minibatch: Option<usize>,
    pub noise_std: Option<f64>,
}

impl ProblemSpec {
    pub fn new(family: Family) -> Self {
        ProblemSpec {
            family,
            dim: None,
            seed: 0,
            transforms: Vec::new(),
            minibatch: None,
            noise_std: None,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = Some(dim);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> ProblemResult<()> {
        if let Some(b) = self.minibatch {
            if !(10..=200).contains(&b) {
                return Err(ProblemError::InvalidSpec(format!(
                    "minibatch size {b} outside [10, 200]"
                )));
            }
        }
        if let Some(s) = self.noise_std {
            if !(0.1..=2.0).contains(&s) {
                return Err(ProblemError::InvalidSpec(format!(
                    "noise std {s} outside [0.1, 2.0]"
                )));
            }
        }
        for t in &self.transforms {
            if let TransformSpec::MonotonicLoss { power: Some(p) } = t {
                if *p <= 0.0 {
                    return Err(ProblemError::InvalidSpec(format!(
                        "monotonic power {p} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One minibatch (or per-step draw) for a stochastic problem.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Row-stacked random vectors, B x d.
    Vectors(NdArray),
    /// Supervised pairs; `y` holds labels as floats.
    Pairs { x: NdArray, y: NdArray },
    /// Additive noise applied to the loss value.
    LossNoise(f64),
    /// Per-tensor 0/1 gradient masks wrapping an inner batch.
    Masked {
        masks: Vec<NdArray>,
        inner: Option<Box<Batch>>,
    },
    /// Per-part batches of a multi-task problem.
    Multi(Vec<Option<Batch>>),
}

/// Location of the global minimum, when known.
#[derive(Debug, Clone)]
pub enum Minimizer {
    Point(Vec<NdArray>),
    /// Loss approaches the infimum along t * direction as t grows.
    RayToInfinity(Vec<NdArray>),
    Unknown,
}

type ObjectiveFn = dyn Fn(&mut Tape, &[Var], Option<&Batch>) -> ProblemResult<Var> + Send + Sync;
type InitFn = dyn Fn(&mut ChaCha8Rng) -> Vec<NdArray> + Send + Sync;
type SamplerFn = dyn Fn(&mut ChaCha8Rng) -> Batch + Send + Sync;
type RawObjective = Arc<dyn Fn(&mut Tape, Var) -> crate::AdResult<Var> + Send + Sync>;

/// A differentiable target task. Immutable after instantiation and safe to
/// share across threads; per-run sampler state is owned by the run.
pub struct Problem {
    name: String,
    param_shapes: Vec<Vec<usize>>,
    init: Arc<InitFn>,
    objective: Arc<ObjectiveFn>,
    sampler: Option<Arc<SamplerFn>>,
    global_min: Option<f64>,
    minimizer: Minimizer,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("param_shapes", &self.param_shapes)
            .field("global_min", &self.global_min)
            .finish()
    }
}

impl Problem {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn n_params(&self) -> usize {
        self.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn global_min(&self) -> Option<f64> {
        self.global_min
    }

    pub fn minimizer(&self) -> &Minimizer {
        &self.minimizer
    }

    /// Draw initial parameters.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<NdArray> {
        (self.init)(rng)
    }

    pub fn has_sampler(&self) -> bool {
        self.sampler.is_some()
    }

    /// Draw one minibatch. Errors on full-batch deterministic problems.
    pub fn sample_minibatch(&self, rng: &mut ChaCha8Rng) -> ProblemResult<Batch> {
        match &self.sampler {
            Some(s) => Ok(s(rng)),
            None => Err(ProblemError::NoSampler(self.name.clone())),
        }
    }

    /// Record the loss at `params` on the caller's tape.
    pub fn loss(&self, tape: &mut Tape, params: &[Var], batch: Option<&Batch>) -> ProblemResult<Var> {
        if params.len() != self.param_shapes.len() {
            return Err(ProblemError::InvalidSpec(format!(
                "{}: expected {} parameter tensors, got {}",
                self.name,
                self.param_shapes.len(),
                params.len()
            )));
        }
        for (v, expect) in params.iter().zip(&self.param_shapes) {
            let got = tape.value(*v).shape();
            if got != expect.as_slice() {
                return Err(ProblemError::InvalidSpec(format!(
                    "{}: parameter shape {:?} does not match {:?}",
                    self.name, got, expect
                )));
            }
        }
        (self.objective)(tape, params, batch)
    }

    /// Loss evaluated on plain arrays (fresh tape).
    pub fn loss_value(&self, params: &[NdArray], batch: Option<&Batch>) -> ProblemResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = self.loss(&mut tape, &vars, batch)?;
        Ok(tape.value(out).item())
    }

    pub(crate) fn from_parts(
        name: String,
        param_shapes: Vec<Vec<usize>>,
        init: Arc<InitFn>,
        objective: Arc<ObjectiveFn>,
        sampler: Option<Arc<SamplerFn>>,
        global_min: Option<f64>,
        minimizer: Minimizer,
    ) -> Problem {
        Problem {
            name,
            param_shapes,
            init,
            objective,
            sampler,
            global_min,
            minimizer,
        }
    }
}

/// Corpus templates, one per family.
pub fn registry_list() -> Vec<ProblemSpec> {
    Family::ALL.iter().map(|f| ProblemSpec::new(*f)).collect()
}

fn uniform_init(lo: Vec<f64>, hi: Vec<f64>) -> Arc<InitFn> {
    Arc::new(move |rng: &mut ChaCha8Rng| {
        let data: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&a, &b)| rng.random_range(a..b))
            .collect();
        vec![NdArray::vector(data)]
    })
}

fn randn_init(dim: usize, std: f64) -> Arc<InitFn> {
    Arc::new(move |rng: &mut ChaCha8Rng| vec![NdArray::randn(rng, &[dim], std)])
}

/// Evaluate a single-tensor objective at a plain point (used to pin shifts).
fn eval_raw(
    f: &(dyn Fn(&mut Tape, Var) -> crate::AdResult<Var> + Send + Sync),
    point: &[f64],
) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(NdArray::vector(point.to_vec()));
    let out = f(&mut tape, v).expect("shift evaluation");
    tape.value(out).item()
}

/// Wrap a rank-1 single-tensor closed form into a Problem.
fn simple_problem(
    name: &str,
    dim: usize,
    init: Arc<InitFn>,
    f: RawObjective,
    shift: f64,
    global_min: Option<f64>,
    minimizer: Minimizer,
) -> Problem {
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, _batch| {
        let raw = f(tape, params[0])?;
        if shift == 0.0 {
            Ok(raw)
        } else {
            Ok(tape.add_const(raw, -shift)?)
        }
    });
    Problem::from_parts(
        name.to_string(),
        vec![vec![dim]],
        init,
        obj,
        None,
        global_min,
        minimizer,
    )
}

fn check_dim(spec: &ProblemSpec, fixed: usize) -> ProblemResult<usize> {
    match spec.dim {
        None => Ok(fixed),
        Some(d) if d == fixed => Ok(fixed),
        Some(d) => Err(ProblemError::InvalidSpec(format!(
            "{} is {fixed}-dimensional, got dim {d}",
            spec.family
        ))),
    }
}

/// Build a problem from its spec. Deterministic for a fixed seed.
pub fn instantiate(spec: &ProblemSpec) -> ProblemResult<Problem> {
    spec.validate()?;
    let mut rng = rng::rng_from(spec.seed, STREAM_INSTANTIATE, spec.family as u64);
    let mut problem = build_base(spec, &mut rng)?;
    for t in &spec.transforms {
        let transform = transforms::Transformation::from_spec(t, problem.param_shapes(), &mut rng)?;
        problem = transforms::apply_transformation(problem, transform)?;
    }
    Ok(problem)
}

fn build_base(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> ProblemResult<Problem> {
    match spec.family {
        Family::Rosenbrock => {
            let dim = check_dim(spec, 2)?;
            Ok(simple_problem(
                "rosenbrock",
                dim,
                uniform_init(vec![-2.0; 2], vec![2.0; 2]),
                Arc::new(functions::rosenbrock),
                0.0,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(vec![1.0, 1.0])]),
            ))
        }
        Family::Ackley => {
            let dim = check_dim(spec, 2)?;
            Ok(simple_problem(
                "ackley",
                dim,
                uniform_init(vec![-5.0; 2], vec![5.0; 2]),
                Arc::new(functions::ackley),
                0.0,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(vec![0.0, 0.0])]),
            ))
        }
        Family::Beale => {
            let dim = check_dim(spec, 2)?;
            Ok(simple_problem(
                "beale",
                dim,
                uniform_init(vec![-4.5; 2], vec![4.5; 2]),
                Arc::new(functions::beale),
                0.0,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(vec![3.0, 0.5])]),
            ))
        }
        Family::Booth => {
            let dim = check_dim(spec, 2)?;
            Ok(simple_problem(
                "booth",
                dim,
                uniform_init(vec![-10.0; 2], vec![10.0; 2]),
                Arc::new(functions::booth),
                0.0,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(vec![1.0, 3.0])]),
            ))
        }
        Family::StyblinskiTang => {
            let dim = spec.dim.unwrap_or(2);
            let root = functions::styblinski_tang_root();
            let minimizer = vec![root; dim];
            let shift = eval_raw(&functions::styblinski_tang_raw, &minimizer);
            Ok(simple_problem(
                "styblinski_tang",
                dim,
                uniform_init(vec![-5.0; dim], vec![5.0; dim]),
                Arc::new(functions::styblinski_tang_raw),
                shift,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(minimizer)]),
            ))
        }
        Family::Matyas => {
            let dim = check_dim(spec, 2)?;
            Ok(simple_problem(
                "matyas",
                dim,
                uniform_init(vec![-10.0; 2], vec![10.0; 2]),
                Arc::new(functions::matyas),
                0.0,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(vec![0.0, 0.0])]),
            ))
        }
        Family::Branin => {
            let dim = check_dim(spec, 2)?;
            let m = functions::branin_minimizer();
            let shift = eval_raw(&functions::branin_raw, &m);
            Ok(simple_problem(
                "branin",
                dim,
                uniform_init(vec![-5.0, 0.0], vec![10.0, 15.0]),
                Arc::new(functions::branin_raw),
                shift,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(m.to_vec())]),
            ))
        }
        Family::Michalewicz => {
            let dim = spec.dim.unwrap_or(2);
            let minimizer = functions::michalewicz_minimizer(dim);
            let raw = move |tape: &mut Tape, v: Var| functions::michalewicz_raw(tape, v, dim);
            let shift = eval_raw(&raw, &minimizer);
            Ok(simple_problem(
                "michalewicz",
                dim,
                uniform_init(vec![0.0; dim], vec![std::f64::consts::PI; dim]),
                Arc::new(raw),
                shift,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(minimizer)]),
            ))
        }
        Family::LogSumExp => {
            let dim = spec.dim.unwrap_or(2);
            let k = 10;
            // center the rows so zero sits in their convex hull and the
            // minimum is finite
            let raw = NdArray::randn(rng, &[k, dim], 1.0);
            let mut centered = raw.data().to_vec();
            for c in 0..dim {
                let mean: f64 = (0..k).map(|r| raw.data()[r * dim + c]).sum::<f64>() / k as f64;
                for r in 0..k {
                    centered[r * dim + c] -= mean;
                }
            }
            let a = NdArray::from_vec(vec![k, dim], centered).expect("pieces");
            let b = NdArray::randn(rng, &[k], 1.0);
            let minimizer = functions::log_sum_exp_minimizer(&a, &b);
            let (af, bf) = (a.clone(), b.clone());
            let raw = move |tape: &mut Tape, v: Var| functions::log_sum_exp_raw(tape, v, &af, &bf);
            let shift = eval_raw(&raw, &minimizer);
            Ok(simple_problem(
                "log_sum_exp",
                dim,
                randn_init(dim, 1.0),
                Arc::new(raw),
                shift,
                Some(0.0),
                Minimizer::Point(vec![NdArray::vector(minimizer)]),
            ))
        }
        Family::QuadraticBowl => {
            let dim = spec.dim.unwrap_or_else(|| rng.random_range(2..=50));
            Ok(build_quadratic_bowl(dim, rng, "quadratic_bowl"))
        }
        Family::LogisticRegression => {
            let dim = spec.dim.unwrap_or_else(|| rng.random_range(2..=10));
            Ok(build_logistic(dim, spec.minibatch, rng))
        }
        Family::MinibatchQuadratic => {
            let dim = spec.dim.unwrap_or_else(|| rng.random_range(2..=10));
            let batch = spec
                .minibatch
                .unwrap_or_else(|| rng.random_range(10..=200));
            Ok(build_minibatch_quadratic(dim, batch))
        }
        Family::NoisyFullbatch => {
            let dim = spec.dim.unwrap_or_else(|| rng.random_range(2..=10));
            let sigma = spec
                .noise_std
                .unwrap_or_else(|| rng.random_range(0.1..2.0));
            Ok(build_noisy_fullbatch(dim, sigma, rng))
        }
        Family::OscillatingValley => {
            let dim = spec.dim.unwrap_or(10);
            Ok(build_oscillating_valley(dim))
        }
        Family::CoupledChain => {
            let dim = match spec.dim {
                None => rng.random_range(8..=16),
                Some(d) if d >= 8 => d,
                Some(d) => {
                    return Err(ProblemError::InvalidSpec(format!(
                        "coupled_chain needs dim >= 8, got {d}"
                    )))
                }
            };
            Ok(build_coupled_chain(dim))
        }
        Family::MinMax => {
            let dim = spec.dim.unwrap_or(10);
            Ok(build_min_max(dim))
        }
    }
}

fn build_quadratic_bowl(dim: usize, rng: &mut ChaCha8Rng, name: &str) -> Problem {
    let a = NdArray::randn(rng, &[dim, dim], 1.0);
    let theta_star = NdArray::randn(rng, &[dim], 1.0);
    let (ac, tc) = (a.clone(), theta_star.clone());
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, _batch| {
        let av = tape.leaf(ac.clone());
        let ts = tape.leaf(tc.clone());
        let diff = tape.sub(params[0], ts)?;
        let col = tape.reshape(diff, &[dim, 1])?;
        let prod = tape.matmul(av, col)?;
        let sq = tape.sq_norm(prod)?;
        Ok(tape.scale(sq, 0.5)?)
    });
    Problem::from_parts(
        name.to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        None,
        Some(0.0),
        Minimizer::Point(vec![theta_star]),
    )
}

fn build_logistic(dim: usize, minibatch: Option<usize>, rng: &mut ChaCha8Rng) -> Problem {
    let n = 200;
    let mut w_true: Vec<f64> = (0..dim).map(|_| rng::normal(rng)).collect();
    let norm = w_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    w_true.iter_mut().for_each(|v| *v /= norm);
    let margin: f64 = rng.random_range(2.5..4.5);
    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let y = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        for w in w_true.iter().take(dim) {
            xs.push(rng::normal(rng) + y * margin * w);
        }
        ys.push(y);
    }
    let x_all = NdArray::from_vec(vec![n, dim], xs).expect("design matrix");
    let y_all = NdArray::vector(ys);

    let (xo, yo) = (x_all.clone(), y_all.clone());
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, batch| {
        let (x, y) = match batch {
            Some(Batch::Pairs { x, y }) => (x.clone(), y.clone()),
            None => (xo.clone(), yo.clone()),
            Some(other) => {
                return Err(ProblemError::InvalidSpec(format!(
                    "logistic_regression got unexpected batch {other:?}"
                )))
            }
        };
        let b_count = x.shape()[0];
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let w = tape.reshape(params[0], &[dim, 1])?;
        let s = tape.matmul(xv, w)?;
        let s = tape.reshape(s, &[b_count])?;
        let bias = tape.reshape(params[1], &[])?;
        let bias = tape.broadcast_scalar(bias, &[b_count])?;
        let s = tape.add(s, bias)?;
        let margins = tape.mul(yv, s)?;
        let neg = tape.neg(margins)?;
        let per = tape.softplus(neg)?;
        Ok(tape.mean(per, None)?)
    });

    let sampler: Option<Arc<SamplerFn>> = minibatch.map(|bsz| {
        let (xs, ys) = (x_all.clone(), y_all.clone());
        let f: Arc<SamplerFn> = Arc::new(move |rng: &mut ChaCha8Rng| {
            let mut bx = Vec::with_capacity(bsz * dim);
            let mut by = Vec::with_capacity(bsz);
            for _ in 0..bsz {
                let i = rng.random_range(0..n);
                bx.extend_from_slice(&xs.data()[i * dim..(i + 1) * dim]);
                by.push(ys.data()[i]);
            }
            Batch::Pairs {
                x: NdArray::from_vec(vec![bsz, dim], bx).expect("batch"),
                y: NdArray::vector(by),
            }
        });
        f
    });

    Problem::from_parts(
        "logistic_regression".to_string(),
        vec![vec![dim], vec![1]],
        Arc::new(move |rng: &mut ChaCha8Rng| {
            vec![
                NdArray::randn(rng, &[dim], 0.5),
                NdArray::randn(rng, &[1], 0.5),
            ]
        }),
        obj,
        sampler,
        None,
        Minimizer::Unknown,
    )
}

fn build_minibatch_quadratic(dim: usize, batch: usize) -> Problem {
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, batch| {
        let Some(Batch::Vectors(v)) = batch else {
            return Err(ProblemError::InvalidSpec(
                "minibatch_quadratic requires a Vectors batch".into(),
            ));
        };
        let b_count = v.shape()[0];
        let vv = tape.leaf(v.clone());
        let theta = tape.reshape(params[0], &[dim, 1])?;
        let prod = tape.matmul(vv, theta)?;
        let prod = tape.reshape(prod, &[b_count])?;
        let sq = tape.mul(prod, prod)?;
        Ok(tape.mean(sq, None)?)
    });
    let sampler: Arc<SamplerFn> =
        Arc::new(move |rng: &mut ChaCha8Rng| Batch::Vectors(NdArray::randn(rng, &[batch, dim], 1.0)));
    Problem::from_parts(
        "minibatch_quadratic".to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        Some(sampler),
        Some(0.0),
        Minimizer::Point(vec![NdArray::zeros(&[dim])]),
    )
}

fn build_noisy_fullbatch(dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Problem {
    let bowl = Arc::new(build_quadratic_bowl(dim, rng, "noisy_fullbatch"));
    let minimizer = bowl.minimizer.clone();
    let inner = Arc::clone(&bowl);
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, batch| {
        let base = inner.loss(tape, params, None)?;
        match batch {
            Some(Batch::LossNoise(eps)) => Ok(tape.add_const(base, *eps)?),
            None => Ok(base),
            Some(other) => Err(ProblemError::InvalidSpec(format!(
                "noisy_fullbatch got unexpected batch {other:?}"
            ))),
        }
    });
    let sampler: Arc<SamplerFn> =
        Arc::new(move |rng: &mut ChaCha8Rng| Batch::LossNoise(rng::normal(rng) * sigma));
    Problem::from_parts(
        "noisy_fullbatch".to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        Some(sampler),
        None,
        minimizer,
    )
}

fn build_oscillating_valley(dim: usize) -> Problem {
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, _batch| {
        let theta = params[0];
        let s3 = tape.scale(theta, 3.0)?;
        let osc = tape.sin(s3)?;
        let osc = tape.scale(osc, 0.5)?;
        let osc = tape.add_const(osc, 1.0)?;
        let decay = tape.scale(theta, -0.1)?;
        let decay = tape.exp(decay)?;
        let valley = tape.mul(osc, decay)?;
        let valley = tape.sum(valley, None)?;
        let neg = tape.neg(theta)?;
        let wall = tape.softplus(neg)?;
        let wall = tape.sum(wall, None)?;
        let wall = tape.scale(wall, 10.0)?;
        Ok(tape.add(valley, wall)?)
    });
    Problem::from_parts(
        "oscillating_valley".to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        None,
        Some(0.0),
        Minimizer::RayToInfinity(vec![NdArray::filled(&[dim], 1.0)]),
    )
}

fn build_coupled_chain(dim: usize) -> Problem {
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, _batch| {
        let theta = params[0];
        let head = tape.slice(theta, 0, 0, 1)?;
        let head_sq = tape.sq_norm(head)?;
        let next = tape.slice(theta, 0, 1, dim - 1)?;
        let prev = tape.slice(theta, 0, 0, dim - 1)?;
        let prev4 = tape.scale(prev, 4.0)?;
        let diff = tape.sub(next, prev4)?;
        let coupling = tape.sq_norm(diff)?;
        Ok(tape.add(head_sq, coupling)?)
    });
    Problem::from_parts(
        "coupled_chain".to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        None,
        Some(0.0),
        Minimizer::Point(vec![NdArray::zeros(&[dim])]),
    )
}

fn build_min_max(dim: usize) -> Problem {
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, _batch| {
        let theta = params[0];
        let mx = tape.max_reduce(theta, None)?;
        let mn = tape.min_reduce(theta, None)?;
        let mx2 = tape.mul(mx, mx)?;
        let mn2 = tape.mul(mn, mn)?;
        Ok(tape.add(mx2, mn2)?)
    });
    Problem::from_parts(
        "min_max".to_string(),
        vec![vec![dim]],
        randn_init(dim, 1.0),
        obj,
        None,
        Some(0.0),
        Minimizer::Point(vec![NdArray::zeros(&[dim])]),
    )
}

/// Two-layer fully-connected classifier on supplied data. Used for the
/// overhead benchmark and the optional MNIST demo; never part of the
/// meta-training corpus.
pub fn mlp_problem(
    name: &str,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    data_x: NdArray,
    data_y: NdArray,
    batch: usize,
) -> Problem {
    let n = data_x.shape()[0];
    let obj: Arc<ObjectiveFn> = Arc::new(move |tape, params, batch| {
        let Some(Batch::Pairs { x, y }) = batch else {
            return Err(ProblemError::InvalidSpec("mlp requires a Pairs batch".into()));
        };
        let b_count = x.shape()[0];
        let xv = tape.leaf(x.clone());
        let h = tape.matmul(xv, params[0])?;
        let b1 = tape.broadcast_row(params[1], b_count)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let logits = tape.matmul(h, params[2])?;
        let b2 = tape.broadcast_row(params[3], b_count)?;
        let logits = tape.add(logits, b2)?;
        // cross entropy: mean(logsumexp(row) - logit[label])
        let m = tape.max_reduce(logits, Some(1))?;
        let mb = tape.broadcast_col(m, classes)?;
        let centered = tape.sub(logits, mb)?;
        let e = tape.exp(centered)?;
        let se = tape.sum(e, Some(1))?;
        let lse = tape.log(se)?;
        let lse = tape.add(lse, m)?;
        let mut onehot = vec![0.0; b_count * classes];
        for (i, &lab) in y.data().iter().enumerate() {
            onehot[i * classes + lab as usize] = 1.0;
        }
        let oh = tape.leaf(NdArray::from_vec(vec![b_count, classes], onehot).expect("onehot"));
        let picked = tape.mul(logits, oh)?;
        let picked = tape.sum(picked, Some(1))?;
        let per = tape.sub(lse, picked)?;
        Ok(tape.mean(per, None)?)
    });
    let (xs, ys) = (data_x, data_y);
    let sampler: Arc<SamplerFn> = Arc::new(move |rng: &mut ChaCha8Rng| {
        let mut bx = Vec::with_capacity(batch * input_dim);
        let mut by = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.random_range(0..n);
            bx.extend_from_slice(&xs.data()[i * input_dim..(i + 1) * input_dim]);
            by.push(ys.data()[i]);
        }
        Batch::Pairs {
            x: NdArray::from_vec(vec![batch, input_dim], bx).expect("batch"),
            y: NdArray::vector(by),
        }
    });
    Problem::from_parts(
        name.to_string(),
        vec![
            vec![input_dim, hidden],
            vec![hidden],
            vec![hidden, classes],
            vec![classes],
        ],
        Arc::new(move |rng: &mut ChaCha8Rng| {
            vec![
                NdArray::randn(rng, &[input_dim, hidden], 1.0 / (input_dim as f64).sqrt()),
                NdArray::zeros(&[hidden]),
                NdArray::randn(rng, &[hidden, classes], 1.0 / (hidden as f64).sqrt()),
                NdArray::zeros(&[classes]),
            ]
        }),
        obj,
        Some(sampler),
        None,
        Minimizer::Unknown,
    )
}

/// Synthetic random-data MLP for overhead benchmarking.
pub fn synthetic_mlp(input_dim: usize, hidden: usize, classes: usize, batch: usize, seed: u64) -> Problem {
    let mut rng = rng::rng_from(seed, STREAM_INSTANTIATE, 0xbe9c);
    let n = 2048;
    let x = NdArray::randn(&mut rng, &[n, input_dim], 1.0);
    let y_data: Vec<f64> = (0..n).map(|_| rng.random_range(0..classes) as f64).collect();
    mlp_problem(
        "synthetic_mlp",
        input_dim,
        hidden,
        classes,
        x,
        NdArray::vector(y_data),
        batch,
    )
}
