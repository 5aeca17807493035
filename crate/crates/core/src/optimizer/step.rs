//! One iteration of the learned optimizer: feature computation, the
//! three-level RNN, and the parameter/attention updates. Everything is
//! recorded on the tape so meta-gradients can flow through whole unrolls.

use super::gru::{cross_bias, gru_step, GruVars};
use super::meta_params::{
    FeatureFlags, MetaParams, Sizes, CH_BETA_G, CH_BETA_LAMBDA, CH_DELTA_ETA, CH_D_PHI,
    CH_D_THETA,
};
use super::state::{TapedState, TapedTensorState};
use crate::error::{AdResult, RunError, RunResult};
use crate::ndarray::NdArray;
use crate::problems::{Batch, Problem};
use crate::tape::{Tape, Var};
use rand_chacha::ChaCha8Rng;

const LAMBDA_FLOOR: f64 = 1e-16;

/// Tape handles for the full set of meta-parameters.
#[derive(Debug, Clone)]
pub struct MetaVars {
    pub flags: FeatureFlags,
    pub sizes: Sizes,
    pub param_gru: GruVars,
    pub tensor_gru: GruVars,
    pub global_gru: GruVars,
    pub readout_w: Var,
    pub readout_b: Var,
    pub shortcut_w: Var,
    pub init_h_param: Var,
    pub init_h_tensor: Var,
    pub init_h_global: Var,
    pub gamma_logit: Var,
    pub c: Var,
}

impl MetaVars {
    pub fn import(tape: &mut Tape, meta: &MetaParams) -> MetaVars {
        MetaVars {
            flags: meta.flags,
            sizes: meta.sizes,
            param_gru: GruVars::import(tape, &meta.param_gru),
            tensor_gru: GruVars::import(tape, &meta.tensor_gru),
            global_gru: GruVars::import(tape, &meta.global_gru),
            readout_w: tape.leaf(meta.readout_w.clone()),
            readout_b: tape.leaf(meta.readout_b.clone()),
            shortcut_w: tape.leaf(meta.shortcut_w.clone()),
            init_h_param: tape.leaf(meta.init_h_param.clone()),
            init_h_tensor: tape.leaf(meta.init_h_tensor.clone()),
            init_h_global: tape.leaf(meta.init_h_global.clone()),
            gamma_logit: tape.leaf(meta.gamma_logit.clone()),
            c: tape.leaf(meta.c.clone()),
        }
    }

    /// Leaf handles in the same order as `MetaParams::arrays`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(44);
        v.extend(self.param_gru.ordered());
        v.extend(self.tensor_gru.ordered());
        v.extend(self.global_gru.ordered());
        v.extend([
            self.readout_w,
            self.readout_b,
            self.shortcut_w,
            self.init_h_param,
            self.init_h_tensor,
            self.init_h_global,
            self.gamma_logit,
            self.c,
        ]);
        v
    }
}

/// Per-parameter RNN outputs for one tensor.
#[derive(Debug, Clone, Copy)]
pub struct StepOutVars {
    pub d_theta: Var,
    pub d_phi: Var,
    pub delta_eta: Var,
    pub beta_g: Var,
    pub beta_lambda: Var,
}

/// Columns of per-timescale decay factors sigma(beta)^(2^-s).
fn decay_matrix(
    tape: &mut Tape,
    beta: Var,
    exponents: &[f64],
) -> AdResult<Var> {
    let n = tape.value(beta).len();
    let sig = tape.sigmoid(beta)?;
    let cols = exponents
        .iter()
        .map(|&e| {
            let p = tape.pow_const(sig, e)?;
            tape.reshape(p, &[n, 1])
        })
        .collect::<AdResult<Vec<_>>>()?;
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        tape.concat(&cols, 1)
    }
}

/// EMA blend: prev * decay + src * (1 - decay).
fn ema(tape: &mut Tape, prev: Var, src: Var, decay: Var) -> AdResult<Var> {
    let kept = tape.mul(prev, decay)?;
    let self_part = tape.mul(src, decay)?;
    let fresh = tape.sub(src, self_part)?;
    tape.add(kept, fresh)
}

/// Update the multi-timescale averaged gradients and their running square
/// magnitudes; return the scaled averaged gradients m and the relative log
/// gradient magnitudes gamma (both N x S).
pub fn update_moving_averages(
    tape: &mut Tape,
    flags: &FeatureFlags,
    ts: &mut TapedTensorState,
    g: Var,
) -> AdResult<(Var, Var)> {
    let s_count = flags.s();
    let exps: Vec<f64> = (0..s_count).map(|s| 2f64.powi(-(s as i32))).collect();
    let d_g = decay_matrix(tape, ts.beta_g, &exps)?;
    let g_bc = tape.broadcast_col(g, s_count)?;
    let g_new = ema(tape, ts.g_avg, g_bc, d_g)?;
    ts.g_avg = g_new;

    if !flags.dynamic_input_scaling {
        let n = tape.value(g).len();
        let gamma = tape.leaf(NdArray::zeros(&[n, s_count]));
        return Ok((g_new, gamma));
    }

    let (lambda_new, m, gamma_src) = if flags.appendix_prev_timescale {
        // lambda columns track timescales -1..S-1; column 0 follows the raw
        // gradient at the doubled rate.
        let lam_exps: Vec<f64> = (0..=s_count).map(|j| 2f64.powi(1 - j as i32)).collect();
        let d_l = decay_matrix(tape, ts.beta_lambda, &lam_exps)?;
        let g_sq = tape.mul(g, g)?;
        let n = tape.value(g).len();
        let g_sq_col = tape.reshape(g_sq, &[n, 1])?;
        let avg_sq = tape.mul(g_new, g_new)?;
        let src = tape.concat(&[g_sq_col, avg_sq], 1)?;
        let lam = ema(tape, ts.lambda, src, d_l)?;
        let faster = tape.slice(lam, 1, 0, s_count)?;
        let floored = tape.clamp_min_const(faster, LAMBDA_FLOOR)?;
        let root = tape.sqrt(floored)?;
        let m = tape.div(g_new, root)?;
        let aligned = tape.slice(lam, 1, 1, s_count)?;
        (lam, m, aligned)
    } else {
        let d_l = decay_matrix(tape, ts.beta_lambda, &exps)?;
        let avg_sq = tape.mul(g_new, g_new)?;
        let lam = ema(tape, ts.lambda, avg_sq, d_l)?;
        let floored = tape.clamp_min_const(lam, LAMBDA_FLOOR)?;
        let root = tape.sqrt(floored)?;
        let m = tape.div(g_new, root)?;
        (lam, m, lam)
    };
    ts.lambda = lambda_new;

    let floored = tape.clamp_min_const(gamma_src, LAMBDA_FLOOR)?;
    let lg = tape.log(floored)?;
    let mean_s = tape.mean(lg, Some(1))?;
    let mean_bc = tape.broadcast_col(mean_s, s_count)?;
    let gamma = tape.sub(lg, mean_bc)?;
    Ok((m, gamma))
}

/// Advance the three RNN levels and read out the per-parameter outputs.
///
/// The Parameter RNN sees its per-parameter inputs plus bias contributions
/// projected from its tensor's hidden state and the global hidden state.
/// Each Tensor RNN then consumes the mean of its parameters' new hidden
/// states (with a global bias), and the Global RNN consumes the mean of the
/// new tensor states.
pub fn hierarchical_step(
    tape: &mut Tape,
    mv: &MetaVars,
    st: &mut TapedState,
    xs: &[Var],
    ms: &[Var],
) -> AdResult<Vec<StepOutVars>> {
    let kp = mv.sizes.k_param;
    let kt = mv.sizes.k_tensor;
    let kg = mv.sizes.k_global;
    let mut outs = Vec::with_capacity(st.tensors.len());

    for (t, ts) in st.tensors.iter_mut().enumerate() {
        let n = tape.value(ts.theta).len();
        let from_tensor = cross_bias(tape, st.h_tensor[t], &mv.param_gru.cross[0])?;
        let from_global = cross_bias(tape, st.h_global, &mv.param_gru.cross[1])?;
        let h_new = gru_step(
            tape,
            &mv.param_gru,
            xs[t],
            ts.h_param,
            &[from_tensor, from_global],
        )?;
        ts.h_param = h_new;

        let mut y = tape.matmul(h_new, mv.readout_w)?;
        let b_row = tape.broadcast_row(mv.readout_b, n)?;
        y = tape.add(y, b_row)?;
        let col = |tape: &mut Tape, y: Var, c: usize| -> AdResult<Var> {
            let s = tape.slice(y, 1, c, 1)?;
            tape.reshape(s, &[n])
        };
        let mut d_theta = col(tape, y, CH_D_THETA)?;
        let mut d_phi = col(tape, y, CH_D_PHI)?;
        let delta_eta = col(tape, y, CH_DELTA_ETA)?;
        let beta_g = col(tape, y, CH_BETA_G)?;
        let beta_lambda = col(tape, y, CH_BETA_LAMBDA)?;

        if mv.flags.shortcut {
            let sc = tape.matmul(ms[t], mv.shortcut_w)?;
            let sc_theta = col(tape, sc, 0)?;
            let sc_phi = col(tape, sc, 1)?;
            d_theta = tape.add(d_theta, sc_theta)?;
            d_phi = tape.add(d_phi, sc_phi)?;
        }

        outs.push(StepOutVars {
            d_theta,
            d_phi,
            delta_eta,
            beta_g,
            beta_lambda,
        });
    }

    // Tensor level: mean of the new parameter hidden states as input.
    let mut new_tensor_rows = Vec::with_capacity(st.tensors.len());
    for (t, ts) in st.tensors.iter().enumerate() {
        let mean_h = tape.mean(ts.h_param, Some(0))?;
        let x_row = tape.reshape(mean_h, &[1, kp])?;
        let h_row = tape.reshape(st.h_tensor[t], &[1, kt])?;
        let from_global = cross_bias(tape, st.h_global, &mv.tensor_gru.cross[0])?;
        let h_new = gru_step(tape, &mv.tensor_gru, x_row, h_row, &[from_global])?;
        new_tensor_rows.push(h_new);
        st.h_tensor[t] = tape.reshape(h_new, &[kt])?;
    }

    // Global level: mean of the new tensor hidden states as input.
    let stacked = if new_tensor_rows.len() == 1 {
        new_tensor_rows[0]
    } else {
        tape.concat(&new_tensor_rows, 0)?
    };
    let g_in = tape.mean(stacked, Some(0))?;
    let g_row = tape.reshape(g_in, &[1, kt])?;
    let hg_row = tape.reshape(st.h_global, &[1, kg])?;
    let hg_new = gru_step(tape, &mv.global_gru, g_row, hg_row, &[])?;
    st.h_global = tape.reshape(hg_new, &[kg])?;

    Ok(outs)
}

/// Apply the direction/step-length decomposition and advance the log
/// learning rates. `noise` holds optional per-tensor parameter noise draws.
pub fn apply_update(
    tape: &mut Tape,
    mv: &MetaVars,
    st: &mut TapedState,
    outs: &[StepOutVars],
    noise: &[Option<NdArray>],
) -> AdResult<()> {
    let gamma = tape.sigmoid(mv.gamma_logit)?;
    let one = tape.scalar(1.0);
    let omg = tape.sub(one, gamma)?;
    let coef = tape.div(omg, gamma)?;

    for (t, ts) in st.tensors.iter_mut().enumerate() {
        let o = &outs[t];
        let n = tape.value(ts.theta).len();

        let normalized = |tape: &mut Tape, d: Var| -> AdResult<Option<Var>> {
            let sq = tape.sq_norm(d)?;
            let norm = tape.sqrt(sq)?;
            if tape.value(norm).item() == 0.0 {
                return Ok(None);
            }
            let denom = tape.scale(norm, 1.0 / n as f64)?;
            Ok(Some(tape.div(d, denom)?))
        };

        let (delta_theta, delta_phi) = if mv.flags.appendix_unnormalized_step {
            let step_scale = tape.exp(ts.eta)?;
            let dt = tape.mul(step_scale, o.d_theta)?;
            let dp = if mv.flags.attention {
                Some(tape.mul(step_scale, o.d_phi)?)
            } else {
                None
            };
            (Some(dt), dp)
        } else {
            let dt = match normalized(tape, o.d_theta)? {
                Some(unit) => {
                    let step_scale = tape.exp(ts.eta)?;
                    Some(tape.mul(step_scale, unit)?)
                }
                None => None,
            };
            let dp = if mv.flags.attention {
                match normalized(tape, o.d_phi)? {
                    Some(unit) => {
                        // attention step length: tensor-mean eta plus the
                        // meta-learned offset c
                        let eta_mean = tape.mean(ts.eta, None)?;
                        let eta_phi = tape.add(eta_mean, mv.c)?;
                        let scale = tape.exp(eta_phi)?;
                        Some(tape.mul(unit, scale)?)
                    }
                    None => None,
                }
            } else {
                None
            };
            (dt, dp)
        };

        let theta_old = ts.theta;
        let mut theta_new = match delta_theta {
            Some(d) => tape.add(theta_old, d)?,
            None => theta_old,
        };
        if let Some(nz) = &noise[t] {
            let nv = tape.leaf(nz.clone());
            theta_new = tape.add(theta_new, nv)?;
        }
        let phi_new = if mv.flags.attention {
            match delta_phi {
                Some(d) => tape.add(theta_old, d)?,
                None => theta_old,
            }
        } else {
            theta_new
        };

        let scaled = tape.mul(coef, o.delta_eta)?;
        let eta_bar_new = tape.add(ts.eta_bar, scaled)?;
        let eta_new = tape.add(o.delta_eta, eta_bar_new)?;

        ts.theta = theta_new;
        ts.phi = phi_new;
        ts.eta = eta_new;
        ts.eta_bar = eta_bar_new;
        ts.beta_g = o.beta_g;
        ts.beta_lambda = o.beta_lambda;
    }
    Ok(())
}

/// Parameters reshaped to the problem's tensor shapes.
fn shaped(tape: &mut Tape, st: &TapedState, pick: impl Fn(&TapedTensorState) -> Var) -> AdResult<Vec<Var>> {
    st.tensors
        .iter()
        .zip(&st.shapes)
        .map(|(t, shape)| tape.reshape(pick(t), shape))
        .collect()
}

/// One full iteration: evaluate the loss at theta (reported and used by the
/// meta objective), take the gradient at the attended point, update the
/// averaged-gradient features, run the hierarchical RNN, and apply the
/// update. Returns the pre-update loss.
///
/// With `second_order` the gradient stays differentiable, so meta-gradients
/// through the unroll include the second-derivative terms.
pub fn optimizer_step(
    tape: &mut Tape,
    mv: &MetaVars,
    st: &mut TapedState,
    problem: &Problem,
    batch: Option<&Batch>,
    second_order: bool,
    noise_rng: &mut ChaCha8Rng,
) -> RunResult<Var> {
    let theta_shaped = shaped(tape, st, |t| t.theta)?;
    let loss_theta = problem.loss(tape, &theta_shaped, batch)?;
    if !tape.value(loss_theta).item().is_finite() {
        return Err(RunError::Diverged { step: st.step });
    }

    let loss_phi = if mv.flags.attention {
        let phi_shaped = shaped(tape, st, |t| t.phi)?;
        problem.loss(tape, &phi_shaped, batch)?
    } else {
        loss_theta
    };

    let phis: Vec<Var> = st.tensors.iter().map(|t| t.phi).collect();
    let grads = if mv.flags.attention {
        tape.gradient(loss_phi, &phis, second_order)?
    } else {
        // gradients taken at theta when attention is off
        let thetas: Vec<Var> = st.tensors.iter().map(|t| t.theta).collect();
        tape.gradient(loss_phi, &thetas, second_order)?
    };

    let mut ms = Vec::with_capacity(st.tensors.len());
    let mut gammas = Vec::with_capacity(st.tensors.len());
    for (ts, g) in st.tensors.iter_mut().zip(&grads) {
        let (m, gamma) = update_moving_averages(tape, &mv.flags, ts, *g)?;
        ms.push(m);
        gammas.push(gamma);
    }

    // relative log learning rate across all parameters of the problem
    let rels: Vec<Var> = if mv.flags.relative_lr {
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for ts in &st.tensors {
            let s = tape.sum(ts.eta, None)?;
            count += tape.value(ts.eta).len();
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let mean = tape.scale(total.expect("at least one tensor"), 1.0 / count as f64)?;
        st.tensors
            .iter()
            .map(|ts| {
                let n = tape.value(ts.eta).len();
                let mb = tape.broadcast_scalar(mean, &[n])?;
                tape.sub(ts.eta, mb)
            })
            .collect::<AdResult<Vec<_>>>()?
    } else {
        st.tensors
            .iter()
            .map(|ts| {
                let n = tape.value(ts.eta).len();
                Ok(tape.leaf(NdArray::zeros(&[n])))
            })
            .collect::<AdResult<Vec<_>>>()?
    };

    let mut xs = Vec::with_capacity(st.tensors.len());
    for ((m, gamma), rel) in ms.iter().zip(&gammas).zip(&rels) {
        let n = tape.value(*rel).len();
        let rel_col = tape.reshape(*rel, &[n, 1])?;
        xs.push(tape.concat(&[*m, *gamma, rel_col], 1)?);
    }

    let outs = hierarchical_step(tape, mv, st, &xs, &ms)?;

    let noise: Vec<Option<NdArray>> = st
        .tensors
        .iter()
        .map(|ts| {
            (st.noise_alpha > 0.0).then(|| {
                let n = tape.value(ts.theta).len();
                NdArray::randn(noise_rng, &[n], st.noise_alpha)
            })
        })
        .collect();

    apply_update(tape, mv, st, &outs, &noise)?;
    st.step += 1;
    Ok(loss_theta)
}
