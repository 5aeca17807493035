//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{AdError, AdResult};
use crate::ndarray::NdArray;
use crate::tape::{Tape, Var};

/// A scalar function of a list of tensors, expressed on a tape.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> AdResult<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &[Var]) -> AdResult<Var>,
{
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> AdResult<Var> {
        self(tape, params)
    }
}

/// Per-coordinate comparison between reverse mode and central differences.
#[derive(Debug, Clone)]
pub struct FdCoord {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// One-sided slopes disagree: the point sits on a kink.
    pub non_smooth: bool,
    /// Within tolerance after the finite-difference noise allowance.
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: Vec<FdCoord>,
    pub max_rel_error: f64,
    pub non_smooth_count: usize,
    pub passed: bool,
}

impl FdReport {
    pub fn failures(&self) -> impl Iterator<Item = &FdCoord> {
        self.coords.iter().filter(|c| !c.ok)
    }
}

fn eval_at(f: &dyn ScalarFn, point: &[NdArray]) -> AdResult<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare the reverse-mode gradient of `f` at `point` against central
/// finite differences with per-coordinate step `h * max(1, |x_i|)`.
///
/// A coordinate passes when `|ad - fd| <= tol * max(|ad|, |fd|) + 10 * nu`,
/// where `nu` is the cancellation noise floor of the central difference.
/// Coordinates whose one-sided slopes disagree are reported as non-smooth
/// failures rather than errors.
pub fn finite_diff_check(
    f: &dyn ScalarFn,
    point: &[NdArray],
    h: f64,
    tol: f64,
) -> AdResult<FdReport> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.gradient(out, &vars, false)?;
    let analytic: Vec<NdArray> = grads.iter().map(|g| tape.value(*g).clone()).collect();
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(AdError::NonFinite {
            context: "finite_diff_check center".into(),
            coord: 0,
        });
    }

    let mut coords = Vec::new();
    let mut max_rel: f64 = 0.0;
    let mut non_smooth_count = 0;
    let mut passed = true;

    for (t, p) in point.iter().enumerate() {
        for i in 0..p.len() {
            let x = p.data()[i];
            let hi = h * x.abs().max(1.0);
            let mut perturbed = point.to_vec();
            perturbed[t].data_mut()[i] = x + hi;
            let fp = eval_at(f, &perturbed)?;
            perturbed[t].data_mut()[i] = x - hi;
            let fm = eval_at(f, &perturbed)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AdError::NonFinite {
                    context: format!("finite_diff_check tensor {t}"),
                    coord: i,
                });
            }
            let numeric = (fp - fm) / (2.0 * hi);
            let a = analytic[t].data()[i];
            let noise = f64::EPSILON * (fp.abs() + fm.abs()) / (2.0 * hi);

            let fwd = (fp - f0) / hi;
            let bwd = (f0 - fm) / hi;
            let slope_gap = (fwd - bwd).abs();
            let non_smooth =
                slope_gap > 0.03 * fwd.abs().max(bwd.abs()).max(1e-9) && slope_gap > 100.0 * noise;

            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-12 {
                0.0
            } else {
                (a - numeric).abs() / scale
            };
            let ok = !non_smooth && (a - numeric).abs() <= tol * scale + 10.0 * noise;
            if !ok {
                passed = false;
            }
            if non_smooth {
                non_smooth_count += 1;
            } else {
                max_rel = max_rel.max(rel);
            }
            coords.push(FdCoord {
                tensor: t,
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
                non_smooth,
                ok,
            });
        }
    }

    Ok(FdReport {
        coords,
        max_rel_error: max_rel,
        non_smooth_count,
        passed,
    })
}
