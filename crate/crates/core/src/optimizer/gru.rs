//! GRU cell forward pass on the tape.
//!
//! Convention: r and z are sigmoid gates, the candidate uses r-gated state,
//! and the new hidden is h' = z * h + (1 - z) * candidate. Cross-level
//! contributions enter as additive preactivation biases on all three gates.

use super::meta_params::{CrossProj, GruWeights};
use crate::error::AdResult;
use crate::ndarray::NdArray;
use crate::tape::{Tape, Var};

/// Tape handles for one GRU's weights.
#[derive(Debug, Clone)]
pub struct GruVars {
    pub wx_r: Var,
    pub wh_r: Var,
    pub b_r: Var,
    pub wx_z: Var,
    pub wh_z: Var,
    pub b_z: Var,
    pub wx_c: Var,
    pub wh_c: Var,
    pub b_c: Var,
    pub cross: Vec<CrossVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossVars {
    pub r: Var,
    pub z: Var,
    pub c: Var,
}

impl GruVars {
    pub fn import(tape: &mut Tape, w: &GruWeights) -> GruVars {
        let leaf = |tape: &mut Tape, a: &NdArray| tape.leaf(a.clone());
        GruVars {
            wx_r: leaf(tape, &w.wx_r),
            wh_r: leaf(tape, &w.wh_r),
            b_r: leaf(tape, &w.b_r),
            wx_z: leaf(tape, &w.wx_z),
            wh_z: leaf(tape, &w.wh_z),
            b_z: leaf(tape, &w.b_z),
            wx_c: leaf(tape, &w.wx_c),
            wh_c: leaf(tape, &w.wh_c),
            b_c: leaf(tape, &w.b_c),
            cross: w
                .cross
                .iter()
                .map(|c: &CrossProj| CrossVars {
                    r: leaf(tape, &c.r),
                    z: leaf(tape, &c.z),
                    c: leaf(tape, &c.c),
                })
                .collect(),
        }
    }

    /// Ordered leaf handles matching the enumeration in `MetaParams::arrays`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![
            self.wx_r, self.wh_r, self.b_r, self.wx_z, self.wh_z, self.b_z, self.wx_c,
            self.wh_c, self.b_c,
        ];
        for c in &self.cross {
            v.push(c.r);
            v.push(c.z);
            v.push(c.c);
        }
        v
    }
}

/// Precomputed per-gate cross-level bias rows (length-K vectors).
#[derive(Debug, Clone, Copy)]
pub struct GateBias {
    pub r: Var,
    pub z: Var,
    pub c: Var,
}

/// Project a source hidden state (length-K vector) through one cross triple.
pub fn cross_bias(tape: &mut Tape, source: Var, proj: &CrossVars) -> AdResult<GateBias> {
    let src_len = tape.value(source).len();
    let row = tape.reshape(source, &[1, src_len])?;
    let mut gate = |w: Var| -> AdResult<Var> {
        let p = tape.matmul(row, w)?;
        let k = tape.value(p).len();
        tape.reshape(p, &[k])
    };
    Ok(GateBias {
        r: gate(proj.r)?,
        z: gate(proj.z)?,
        c: gate(proj.c)?,
    })
}

/// One GRU step over a batch of rows: x is [N, I], h is [N, K].
/// `extra` holds additive per-gate bias vectors of length K.
pub fn gru_step(
    tape: &mut Tape,
    w: &GruVars,
    x: Var,
    h: Var,
    extra: &[GateBias],
) -> AdResult<Var> {
    let n = tape.value(x).shape()[0];
    let preact = |tape: &mut Tape, wx: Var, wh: Var, b: Var, hin: Var, pick: fn(&GateBias) -> Var| -> AdResult<Var> {
        let xt = tape.matmul(x, wx)?;
        let ht = tape.matmul(hin, wh)?;
        let mut acc = tape.add(xt, ht)?;
        let brow = tape.broadcast_row(b, n)?;
        acc = tape.add(acc, brow)?;
        for e in extra {
            let row = tape.broadcast_row(pick(e), n)?;
            acc = tape.add(acc, row)?;
        }
        Ok(acc)
    };
    let pre_r = preact(tape, w.wx_r, w.wh_r, w.b_r, h, |e| e.r)?;
    let r = tape.sigmoid(pre_r)?;
    let pre_z = preact(tape, w.wx_z, w.wh_z, w.b_z, h, |e| e.z)?;
    let z = tape.sigmoid(pre_z)?;
    let rh = tape.mul(r, h)?;
    let pre_c = preact(tape, w.wx_c, w.wh_c, w.b_c, rh, |e| e.c)?;
    let cand = tape.tanh(pre_c)?;
    let keep = tape.mul(z, h)?;
    let zc = tape.mul(z, cand)?;
    let gated = tape.sub(cand, zc)?;
    tape.add(keep, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::meta_params::{FeatureFlags, MetaParams, Sizes};

    /// With all-zero weights and zero input, the update gate is 0.5 and the
    /// candidate is 0, so h' = 0.5 h.
    #[test]
    fn zero_weights_halve_hidden_state() {
        let flags = FeatureFlags::default();
        let sizes = Sizes {
            k_param: 4,
            k_tensor: 3,
            k_global: 3,
        };
        let mut meta = MetaParams::init(flags, sizes, 1);
        for (_, a) in meta.arrays_mut() {
            let d = a.data_mut();
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let w = GruVars::import(&mut tape, &meta.param_gru);
        let x = tape.leaf(NdArray::zeros(&[2, flags.input_width()]));
        let h0 = NdArray::from_vec(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let h = tape.leaf(h0.clone());
        let h1 = gru_step(&mut tape, &w, x, h, &[]).unwrap();
        let got = tape.value(h1);
        for (a, b) in got.data().iter().zip(h0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15, "{a} vs {b}");
        }
    }
}
