//! Transformation wrappers over corpus problems: sparse gradients, variable
//! rescaling, monotonic loss warps, and multi-task composition.

use super::{Batch, Minimizer, Problem, ProblemSpec, TransformSpec};
use crate::error::{ProblemError, ProblemResult};
use crate::ndarray::NdArray;
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// A fully parameterized transformation, ready to apply.
pub enum Transformation {
    /// Keep this fraction of gradient entries each step; zero the rest.
    SparseGradient { keep_fraction: f64 },
    /// Reparameterize the loss as L(D u) with these per-tensor diagonals.
    RescaleVariables { scales: Vec<NdArray> },
    /// Raise the loss to a positive power.
    MonotonicLoss { power: f64 },
    /// Sum losses and concatenate the parameter lists of these problems.
    MultiTask { others: Vec<Problem> },
}

impl Transformation {
    /// Draw unspecified parameters with the instantiation rng.
    pub fn from_spec(
        spec: &TransformSpec,
        base_shapes: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> ProblemResult<Transformation> {
        Ok(match spec {
            TransformSpec::SparseGradient { keep_fraction } => {
                let p = match keep_fraction {
                    Some(p) => *p,
                    None => {
                        const CHOICES: [f64; 4] = [0.01, 0.05, 0.1, 0.25];
                        CHOICES[rng.random_range(0..CHOICES.len())]
                    }
                };
                Transformation::SparseGradient { keep_fraction: p }
            }
            TransformSpec::RescaleVariables => {
                let scales = base_shapes
                    .iter()
                    .map(|s| {
                        let n: usize = s.iter().product();
                        let data = (0..n).map(|_| rng::log_uniform(rng, 1e-2, 1e2)).collect();
                        NdArray::from_vec(s.clone(), data).expect("scale diag")
                    })
                    .collect();
                Transformation::RescaleVariables { scales }
            }
            TransformSpec::MonotonicLoss { power } => {
                let p = match power {
                    Some(p) => *p,
                    None => {
                        const CHOICES: [f64; 3] = [0.5, 2.0, 3.0];
                        CHOICES[rng.random_range(0..CHOICES.len())]
                    }
                };
                Transformation::MonotonicLoss { power: p }
            }
            TransformSpec::MultiTask { families } => {
                let others = families
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let sub = ProblemSpec::new(*f).with_seed(rng.random::<u64>() ^ i as u64);
                        super::instantiate(&sub)
                    })
                    .collect::<ProblemResult<Vec<_>>>()?;
                Transformation::MultiTask { others }
            }
        })
    }
}

/// Apply a transformation, producing a new problem.
pub fn apply_transformation(base: Problem, t: Transformation) -> ProblemResult<Problem> {
    match t {
        Transformation::SparseGradient { keep_fraction } => sparse_gradient(base, keep_fraction),
        Transformation::RescaleVariables { scales } => rescale_variables(base, scales),
        Transformation::MonotonicLoss { power } => monotonic_loss(base, power),
        Transformation::MultiTask { others } => {
            let mut parts = vec![base];
            parts.extend(others);
            multi_task(parts)
        }
    }
}

/// Each step an independent mask keeps a fraction of gradient entries and
/// zeroes the rest. The loss value is unchanged; only gradients are masked.
/// At least one entry per tensor survives.
pub fn sparse_gradient(base: Problem, keep_fraction: f64) -> ProblemResult<Problem> {
    if !(0.0..=1.0).contains(&keep_fraction) || keep_fraction == 0.0 {
        return Err(ProblemError::IncompatibleTransform(format!(
            "sparse-gradient keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let base = Arc::new(base);
    let shapes = base.param_shapes().to_vec();
    let name = format!("{}+sparse", base.name());
    let global_min = base.global_min();
    let minimizer = base.minimizer().clone();

    let inner = Arc::clone(&base);
    let obj = Arc::new(
        move |tape: &mut crate::Tape, params: &[crate::Var], batch: Option<&Batch>| {
            let Some(Batch::Masked { masks, inner: inner_batch }) = batch else {
                return Err(ProblemError::InvalidSpec(
                    "sparse-gradient problem requires a Masked batch".into(),
                ));
            };
            let mut masked = Vec::with_capacity(params.len());
            for (v, m) in params.iter().zip(masks) {
                let keep = tape.leaf(m.clone());
                let drop = tape.leaf(m.map(|x| 1.0 - x));
                let kept = tape.mul(*v, keep)?;
                let frozen = tape.stop_gradient(*v)?;
                let dropped = tape.mul(frozen, drop)?;
                masked.push(tape.add(kept, dropped)?);
            }
            inner.loss(tape, &masked, inner_batch.as_deref())
        },
    );

    let sample_inner = Arc::clone(&base);
    let mask_shapes = shapes.clone();
    let sampler = Arc::new(move |rng: &mut ChaCha8Rng| {
        let masks = mask_shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let k = ((keep_fraction * n as f64).round() as usize).clamp(1, n);
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = rng.random_range(i..n);
                    idx.swap(i, j);
                }
                let mut mask = vec![0.0; n];
                for &i in &idx[..k] {
                    mask[i] = 1.0;
                }
                NdArray::from_vec(s.clone(), mask).expect("mask")
            })
            .collect();
        let inner_batch = if sample_inner.has_sampler() {
            Some(Box::new(
                sample_inner
                    .sample_minibatch(rng)
                    .expect("inner sampler exists"),
            ))
        } else {
            None
        };
        Batch::Masked {
            masks,
            inner: inner_batch,
        }
    });

    let init_inner = Arc::clone(&base);
    Ok(Problem::from_parts(
        name,
        shapes,
        Arc::new(move |rng: &mut ChaCha8Rng| init_inner.init_params(rng)),
        obj,
        Some(sampler),
        global_min,
        minimizer,
    ))
}

/// Linear change of variables: the wrapped loss is L(D u) and the initial
/// point moves to D^-1 theta0, so initial loss values match the base.
pub fn rescale_variables(base: Problem, scales: Vec<NdArray>) -> ProblemResult<Problem> {
    if scales.len() != base.param_shapes().len()
        || scales
            .iter()
            .zip(base.param_shapes())
            .any(|(s, shape)| s.shape() != shape.as_slice())
    {
        return Err(ProblemError::IncompatibleTransform(
            "rescale diagonals do not match parameter shapes".into(),
        ));
    }
    if scales.iter().any(|s| s.data().iter().any(|&v| v <= 0.0)) {
        return Err(ProblemError::IncompatibleTransform(
            "rescale diagonals must be positive".into(),
        ));
    }
    let base = Arc::new(base);
    let shapes = base.param_shapes().to_vec();
    let name = format!("{}+rescale", base.name());
    let global_min = base.global_min();
    let minimizer = match base.minimizer() {
        Minimizer::Point(p) => Minimizer::Point(
            p.iter()
                .zip(&scales)
                .map(|(x, d)| x.zip_map(d, "rescale", |a, b| a / b).expect("shapes match"))
                .collect(),
        ),
        Minimizer::RayToInfinity(dir) => Minimizer::RayToInfinity(
            dir.iter()
                .zip(&scales)
                .map(|(x, d)| x.zip_map(d, "rescale", |a, b| a / b).expect("shapes match"))
                .collect(),
        ),
        Minimizer::Unknown => Minimizer::Unknown,
    };

    let inner = Arc::clone(&base);
    let obj_scales = scales.clone();
    let obj = Arc::new(
        move |tape: &mut crate::Tape, params: &[crate::Var], batch: Option<&Batch>| {
            let mut scaled = Vec::with_capacity(params.len());
            for (v, d) in params.iter().zip(&obj_scales) {
                let dv = tape.leaf(d.clone());
                scaled.push(tape.mul(*v, dv)?);
            }
            inner.loss(tape, &scaled, batch)
        },
    );

    let init_inner = Arc::clone(&base);
    let init_scales = scales;
    let init = Arc::new(move |rng: &mut ChaCha8Rng| {
        init_inner
            .init_params(rng)
            .iter()
            .zip(&init_scales)
            .map(|(x, d)| x.zip_map(d, "rescale", |a, b| a / b).expect("shapes match"))
            .collect()
    });

    let sampler = base.has_sampler().then(|| {
        let s = Arc::clone(&base);
        let f: Arc<dyn Fn(&mut ChaCha8Rng) -> Batch + Send + Sync> =
            Arc::new(move |rng: &mut ChaCha8Rng| s.sample_minibatch(rng).expect("sampler exists"));
        f
    });

    Ok(Problem::from_parts(
        name, shapes, init, obj, sampler, global_min, minimizer,
    ))
}

/// Raise the loss to a positive power.
pub fn monotonic_loss(base: Problem, power: f64) -> ProblemResult<Problem> {
    if power <= 0.0 {
        return Err(ProblemError::IncompatibleTransform(format!(
            "monotonic power must be positive, got {power}"
        )));
    }
    let base = Arc::new(base);
    let shapes = base.param_shapes().to_vec();
    let name = format!("{}+pow", base.name());
    let global_min = base.global_min().map(|m| if m >= 0.0 { m.powf(power) } else { m });
    let minimizer = base.minimizer().clone();

    let inner = Arc::clone(&base);
    let obj = Arc::new(
        move |tape: &mut crate::Tape, params: &[crate::Var], batch: Option<&Batch>| {
            let l = inner.loss(tape, params, batch)?;
            Ok(tape.pow_const(l, power)?)
        },
    );
    let init_inner = Arc::clone(&base);
    let sampler = base.has_sampler().then(|| {
        let s = Arc::clone(&base);
        let f: Arc<dyn Fn(&mut ChaCha8Rng) -> Batch + Send + Sync> =
            Arc::new(move |rng: &mut ChaCha8Rng| s.sample_minibatch(rng).expect("sampler exists"));
        f
    });
    Ok(Problem::from_parts(
        name,
        shapes,
        Arc::new(move |rng: &mut ChaCha8Rng| init_inner.init_params(rng)),
        obj,
        sampler,
        global_min,
        minimizer,
    ))
}

/// Sum the losses and concatenate the parameter lists of several problems.
pub fn multi_task(parts: Vec<Problem>) -> ProblemResult<Problem> {
    if parts.is_empty() {
        return Err(ProblemError::IncompatibleTransform(
            "multi-task of zero problems".into(),
        ));
    }
    let parts: Vec<Arc<Problem>> = parts.into_iter().map(Arc::new).collect();
    let name = format!(
        "multi_task({})",
        parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
    );
    let shapes: Vec<Vec<usize>> = parts
        .iter()
        .flat_map(|p| p.param_shapes().to_vec())
        .collect();
    let counts: Vec<usize> = parts.iter().map(|p| p.param_shapes().len()).collect();
    let global_min = parts
        .iter()
        .map(|p| p.global_min())
        .try_fold(0.0, |acc, m| m.map(|v| acc + v));
    let minimizer = {
        let points: Option<Vec<NdArray>> = parts
            .iter()
            .map(|p| match p.minimizer() {
                Minimizer::Point(v) => Some(v.clone()),
                _ => None,
            })
            .try_fold(Vec::new(), |mut acc, m| {
                m.map(|v| {
                    acc.extend(v);
                    acc
                })
            });
        match points {
            Some(v) => Minimizer::Point(v),
            None => Minimizer::Unknown,
        }
    };

    let obj_parts = parts.clone();
    let obj_counts = counts.clone();
    let obj = Arc::new(
        move |tape: &mut crate::Tape, params: &[crate::Var], batch: Option<&Batch>| {
            let batches: Vec<Option<&Batch>> = match batch {
                Some(Batch::Multi(v)) => v.iter().map(|b| b.as_ref()).collect(),
                None => vec![None; obj_parts.len()],
                Some(other) => {
                    return Err(ProblemError::InvalidSpec(format!(
                        "multi_task got unexpected batch {other:?}"
                    )))
                }
            };
            let mut off = 0;
            let mut total: Option<crate::Var> = None;
            for ((p, &c), b) in obj_parts.iter().zip(&obj_counts).zip(batches) {
                let l = p.loss(tape, &params[off..off + c], b)?;
                off += c;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            Ok(total.expect("at least one part"))
        },
    );

    let init_parts = parts.clone();
    let init = Arc::new(move |rng: &mut ChaCha8Rng| {
        init_parts
            .iter()
            .flat_map(|p| p.init_params(rng))
            .collect()
    });

    let sampler = parts.iter().any(|p| p.has_sampler()).then(|| {
        let sp = parts.clone();
        let f: Arc<dyn Fn(&mut ChaCha8Rng) -> Batch + Send + Sync> =
            Arc::new(move |rng: &mut ChaCha8Rng| {
                Batch::Multi(
                    sp.iter()
                        .map(|p| {
                            p.has_sampler()
                                .then(|| p.sample_minibatch(rng).expect("sampler exists"))
                        })
                        .collect(),
                )
            });
        f
    });

    Ok(Problem::from_parts(
        name, shapes, init, obj, sampler, global_min, minimizer,
    ))
}
