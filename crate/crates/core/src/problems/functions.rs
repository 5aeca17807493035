//! Closed-form objectives from the optimization literature, plus the small
//! plain-array minimizers used to pin their offsets at instantiation time.
//!
//! Functions whose standard minimum is nonzero are shifted so the minimum
//! is exactly zero: each builder evaluates its own unshifted form at the
//! located minimizer and subtracts that value, which makes the loss at the
//! minimizer bitwise zero.

use crate::error::AdResult;
use crate::tape::{Tape, Var};

use std::f64::consts::{E, PI};

/// Scalar view of one coordinate of a rank-1 parameter vector.
pub fn coord(tape: &mut Tape, v: Var, i: usize) -> AdResult<Var> {
    let s = tape.slice(v, 0, i, 1)?;
    tape.reshape(s, &[])
}

pub fn rosenbrock(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let x = coord(tape, v, 0)?;
    let y = coord(tape, v, 1)?;
    let nx = tape.neg(x)?;
    let one_m_x = tape.add_const(nx, 1.0)?;
    let a = tape.mul(one_m_x, one_m_x)?;
    let x2 = tape.mul(x, x)?;
    let d = tape.sub(y, x2)?;
    let d2 = tape.mul(d, d)?;
    let b = tape.scale(d2, 100.0)?;
    tape.add(a, b)
}

pub fn ackley(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let sq = tape.sq_norm(v)?;
    let half = tape.scale(sq, 0.5)?;
    let r = tape.sqrt(half)?;
    let e1 = tape.scale(r, -0.2)?;
    let e1 = tape.exp(e1)?;
    let t1 = tape.scale(e1, -20.0)?;
    let vx = tape.scale(v, 2.0 * PI)?;
    let c = tape.cos(vx)?;
    let mc = tape.mean(c, None)?;
    let e2 = tape.exp(mc)?;
    let t2 = tape.neg(e2)?;
    let s = tape.add(t1, t2)?;
    tape.add_const(s, 20.0 + E)
}

pub fn beale(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let x = coord(tape, v, 0)?;
    let y = coord(tape, v, 1)?;
    let mut total = None;
    for (c, p) in [(1.5, 1), (2.25, 2), (2.625, 3)] {
        let yp = tape.pow_const(y, p as f64)?;
        let xyp = tape.mul(x, yp)?;
        let inner = tape.sub(xyp, x)?;
        let inner = tape.add_const(inner, c)?;
        let sq = tape.mul(inner, inner)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    Ok(total.unwrap())
}

pub fn booth(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let x = coord(tape, v, 0)?;
    let y = coord(tape, v, 1)?;
    let y2 = tape.scale(y, 2.0)?;
    let t1 = tape.add(x, y2)?;
    let t1 = tape.add_const(t1, -7.0)?;
    let t1 = tape.mul(t1, t1)?;
    let x2 = tape.scale(x, 2.0)?;
    let t2 = tape.add(x2, y)?;
    let t2 = tape.add_const(t2, -5.0)?;
    let t2 = tape.mul(t2, t2)?;
    tape.add(t1, t2)
}

pub fn matyas(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let x = coord(tape, v, 0)?;
    let y = coord(tape, v, 1)?;
    let sq = tape.sq_norm(v)?;
    let t1 = tape.scale(sq, 0.26)?;
    let xy = tape.mul(x, y)?;
    let t2 = tape.scale(xy, -0.48)?;
    tape.add(t1, t2)
}

/// Unshifted Styblinski-Tang: sum(x^4 - 16 x^2 + 5 x) / 2.
pub fn styblinski_tang_raw(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let x4 = tape.pow_const(v, 4.0)?;
    let x2 = tape.mul(v, v)?;
    let t2 = tape.scale(x2, -16.0)?;
    let t3 = tape.scale(v, 5.0)?;
    let s = tape.add(x4, t2)?;
    let s = tape.add(s, t3)?;
    let total = tape.sum(s, None)?;
    tape.scale(total, 0.5)
}

/// Argmin of the per-coordinate Styblinski-Tang term, by Newton iteration.
pub fn styblinski_tang_root() -> f64 {
    // g'(x) = 2x^3 - 16x + 2.5, g''(x) = 6x^2 - 16
    let mut x = -2.9f64;
    for _ in 0..100 {
        let g = 2.0 * x.powi(3) - 16.0 * x + 2.5;
        let h = 6.0 * x * x - 16.0;
        x -= g / h;
    }
    x
}

/// Unshifted Branin with the standard constants.
pub fn branin_raw(tape: &mut Tape, v: Var) -> AdResult<Var> {
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    let x = coord(tape, v, 0)?;
    let y = coord(tape, v, 1)?;
    let x2 = tape.mul(x, x)?;
    let bx2 = tape.scale(x2, -b)?;
    let cx = tape.scale(x, c)?;
    let inner = tape.add(y, bx2)?;
    let inner = tape.add(inner, cx)?;
    let inner = tape.add_const(inner, -r)?;
    let sq = tape.mul(inner, inner)?;
    let t1 = tape.scale(sq, a)?;
    let cx2 = tape.cos(x)?;
    let t2 = tape.scale(cx2, s * (1.0 - t))?;
    let sum = tape.add(t1, t2)?;
    tape.add_const(sum, s)
}

/// A Branin global minimizer in closed form.
pub fn branin_minimizer() -> [f64; 2] {
    [PI, 2.275]
}

/// Unshifted Michalewicz with steepness m=10.
pub fn michalewicz_raw(tape: &mut Tape, v: Var, dim: usize) -> AdResult<Var> {
    let mut total = None;
    for i in 0..dim {
        let xi = coord(tape, v, i)?;
        let s1 = tape.sin(xi)?;
        let x2 = tape.mul(xi, xi)?;
        let arg = tape.scale(x2, (i + 1) as f64 / PI)?;
        let s2 = tape.sin(arg)?;
        let s2p = tape.pow_const(s2, 20.0)?;
        let term = tape.mul(s1, s2p)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    tape.neg(total.unwrap())
}

/// Per-coordinate global minimizer of Michalewicz on [0, pi], located by a
/// dense grid plus golden-section polish. The terms are separable, so the
/// joint minimizer is exact.
pub fn michalewicz_minimizer(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let f = |x: f64| {
                let s2 = ((i + 1) as f64 * x * x / PI).sin();
                -(x.sin() * s2.powi(20))
            };
            let n = 4000;
            let mut best_x = 0.0;
            let mut best = f64::INFINITY;
            for k in 0..=n {
                let x = PI * k as f64 / n as f64;
                let y = f(x);
                if y < best {
                    best = y;
                    best_x = x;
                }
            }
            let w = PI / n as f64;
            golden_section(f, (best_x - w).max(0.0), (best_x + w).min(PI))
        })
        .collect()
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..120 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Unshifted log-sum-exp of k affine pieces: log sum_k exp(a_k . x + b_k).
pub fn log_sum_exp_raw(tape: &mut Tape, v: Var, a: &crate::NdArray, b: &crate::NdArray) -> AdResult<Var> {
    let k = a.shape()[0];
    let dim = a.shape()[1];
    let av = tape.leaf(a.clone());
    let bv = tape.leaf(b.clone());
    let x = tape.reshape(v, &[dim, 1])?;
    let ax = tape.matmul(av, x)?;
    let ax = tape.reshape(ax, &[k])?;
    let z = tape.add(ax, bv)?;
    // stable: log sum exp(z) = max z + log sum exp(z - max z)
    let m = tape.max_reduce(z, None)?;
    let mb = tape.broadcast_scalar(m, &[k])?;
    let zc = tape.sub(z, mb)?;
    let e = tape.exp(zc)?;
    let se = tape.sum(e, None)?;
    let l = tape.log(se)?;
    tape.add(l, m)
}

/// Minimize the (convex) log-sum-exp on plain arrays: gradient descent with
/// backtracking, then Newton polish. Independent of the tape engine.
pub fn log_sum_exp_minimizer(a: &crate::NdArray, b: &crate::NdArray) -> Vec<f64> {
    let k = a.shape()[0];
    let dim = a.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let value_grad = |x: &[f64]| {
        let mut z = vec![0.0; k];
        for r in 0..k {
            let mut s = bd[r];
            for c in 0..dim {
                s += ad[r * dim + c] * x[c];
            }
            z[r] = s;
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut se = 0.0;
        let mut p = vec![0.0; k];
        for r in 0..k {
            p[r] = (z[r] - m).exp();
            se += p[r];
        }
        let val = m + se.ln();
        for r in 0..k {
            p[r] /= se;
        }
        let mut g = vec![0.0; dim];
        for r in 0..k {
            for c in 0..dim {
                g[c] += p[r] * ad[r * dim + c];
            }
        }
        (val, g, p)
    };

    let mut x = vec![0.0; dim];
    let mut step = 1.0;
    let (mut val, mut g, mut p) = value_grad(&x);
    for _ in 0..500 {
        let mut trial = x.clone();
        for c in 0..dim {
            trial[c] -= step * g[c];
        }
        let (tv, tg, tp) = value_grad(&trial);
        if tv < val {
            x = trial;
            val = tv;
            g = tg;
            p = tp;
            step *= 1.3;
        } else {
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
    }
    // Newton polish: H = A^T (diag(p) - p p^T) A
    for _ in 0..30 {
        let mut h = vec![0.0; dim * dim];
        let mut pa = vec![0.0; dim];
        for (r, pr) in p.iter().enumerate() {
            for c in 0..dim {
                pa[c] += pr * ad[r * dim + c];
            }
        }
        for r in 0..k {
            for i in 0..dim {
                for j in 0..dim {
                    h[i * dim + j] += p[r] * ad[r * dim + i] * ad[r * dim + j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                h[i * dim + j] -= pa[i] * pa[j];
            }
        }
        if let Some(d) = solve(&h, &g, dim) {
            let mut trial = x.clone();
            for c in 0..dim {
                trial[c] -= d[c];
            }
            let (tv, tg, tp) = value_grad(&trial);
            if tv <= val {
                x = trial;
                val = tv;
                g = tg;
                p = tp;
            } else {
                break;
            }
        } else {
            break;
        }
    }
    x
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for c in row + 1..n {
            s -= m[row * n + c] * x[c];
        }
        x[row] = s / m[row * n + row];
    }
    Some(x)
}
