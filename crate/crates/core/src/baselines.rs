//! Reference optimizers for head-to-head comparisons: ADAM, RMSProp, and
//! SGD with momentum, with conventional default hyperparameters.

use crate::error::RunResult;
use crate::ndarray::NdArray;
use crate::optimizer::RunSeeds;
use crate::problems::Problem;
use crate::rng;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Adam,
    RmsProp,
    SgdMomentum,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Adam => "adam",
            BaselineKind::RmsProp => "rmsprop",
            BaselineKind::SgdMomentum => "sgd_momentum",
        }
    }
}

/// Baseline configuration. Decay defaults: adam (0.9, 0.999, eps 1e-8),
/// rmsprop (0.9, eps 1e-10), momentum 0.9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BaselineConfig {
    pub fn adam(learning_rate: f64) -> Self {
        BaselineConfig {
            kind: BaselineKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            momentum: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        BaselineConfig {
            kind: BaselineKind::RmsProp,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            momentum: 0.9,
            epsilon: 1e-10,
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        BaselineConfig {
            kind: BaselineKind::SgdMomentum,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            momentum,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.learning_rate <= 0.0 {
            return Err(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("decay", self.decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

/// Accumulator slots, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct BaselineSlots {
    pub first: Vec<NdArray>,
    pub second: Vec<NdArray>,
    pub step: u64,
}

impl BaselineSlots {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        BaselineSlots {
            first: shapes.iter().map(|s| NdArray::zeros(s)).collect(),
            second: shapes.iter().map(|s| NdArray::zeros(s)).collect(),
            step: 0,
        }
    }
}

/// One update over caller-owned tensors and slots.
pub fn baseline_step(
    config: &BaselineConfig,
    slots: &mut BaselineSlots,
    theta: &mut [NdArray],
    grads: &[NdArray],
) {
    slots.step += 1;
    let lr = config.learning_rate;
    match config.kind {
        BaselineKind::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            let bc1 = 1.0 - b1.powi(slots.step as i32);
            let bc2 = 1.0 - b2.powi(slots.step as i32);
            for ((t, g), (m, v)) in theta
                .iter_mut()
                .zip(grads)
                .zip(slots.first.iter_mut().zip(slots.second.iter_mut()))
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let td = t.data_mut();
                for i in 0..td.len() {
                    let gi = g.data()[i];
                    md[i] = b1 * md[i] + (1.0 - b1) * gi;
                    vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    td[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
                }
            }
        }
        BaselineKind::RmsProp => {
            let d = config.decay;
            for ((t, g), v) in theta.iter_mut().zip(grads).zip(slots.second.iter_mut()) {
                let vd = v.data_mut();
                let td = t.data_mut();
                for i in 0..td.len() {
                    let gi = g.data()[i];
                    vd[i] = d * vd[i] + (1.0 - d) * gi * gi;
                    td[i] -= lr * gi / (vd[i].sqrt() + config.epsilon);
                }
            }
        }
        BaselineKind::SgdMomentum => {
            let mu = config.momentum;
            for ((t, g), m) in theta.iter_mut().zip(grads).zip(slots.first.iter_mut()) {
                let md = m.data_mut();
                let td = t.data_mut();
                for i in 0..td.len() {
                    md[i] = mu * md[i] + g.data()[i];
                    td[i] -= lr * md[i];
                }
            }
        }
    }
}

/// Final losses and full curves for each learning rate in the sweep.
/// Divergence is recorded as +inf, not an error.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub learning_rate: f64,
    pub final_loss: f64,
    pub curve: Vec<f64>,
    pub diverged: bool,
}

pub fn lr_sweep(
    problem: &Problem,
    template: &BaselineConfig,
    lrs: &[f64],
    steps: u64,
    seed: u64,
) -> RunResult<Vec<SweepEntry>> {
    assert!(!lrs.is_empty(), "lr sweep needs at least one learning rate");
    let mut out = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let config = BaselineConfig {
            learning_rate: lr,
            ..*template
        };
        let run =
            crate::runner::run_baseline(problem, &config, steps, &RunSeeds::from_master(seed))?;
        out.push(SweepEntry {
            learning_rate: lr,
            final_loss: if run.diverged {
                f64::INFINITY
            } else {
                run.final_loss()
            },
            curve: run.losses.clone(),
            diverged: run.diverged,
        });
    }
    Ok(out)
}

/// First-order gradient of a problem loss at plain-valued parameters.
pub fn problem_gradient(
    problem: &Problem,
    theta: &[NdArray],
    batch: Option<&crate::problems::Batch>,
) -> RunResult<(f64, Vec<NdArray>)> {
    let mut tape = Tape::new();
    let vars: Vec<crate::Var> = theta.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = problem.loss(&mut tape, &vars, batch)?;
    let value = tape.value(loss).item();
    let grads = tape.gradient(loss, &vars, false)?;
    let grads = grads.into_iter().map(|g| tape.value(g).clone()).collect();
    Ok((value, grads))
}

/// Sample initial parameters for a seeded baseline run.
pub fn sampled_init(problem: &Problem, seeds: &RunSeeds) -> Vec<NdArray> {
    let mut prng = rng::rng_seeded(seeds.params);
    problem.init_params(&mut prng)
}
