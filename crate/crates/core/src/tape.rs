//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations are recorded during the forward pass. The backward pass is
//! itself expressed in recorded primitives: `gradient` with `create_graph`
//! appends the adjoint computation to the tape, so a second reverse pass
//! through a returned gradient yields true second derivatives. Without
//! `create_graph` the same pass runs, the gradient values are copied out,
//! and the appended nodes are truncated away, which keeps the two modes
//! numerically bit-identical.

use crate::error::{AdError, AdResult};
use crate::ndarray::{NdArray, Shape};
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

/// Handle to a recorded value. Cheap to copy; the value lives on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    id: u32,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id as usize
    }
}

/// Primitive operations. The set is fixed; every loss and the optimizer
/// itself compose from it. `PowConst`, `ScaleConst`, and `AddConst` are
/// elementwise ops with a compile-time constant parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Sin,
    Cos,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sqrt,
    PowConst(f64),
    ScaleConst(f64),
    AddConst(f64),
    Matmul,
    Transpose,
    Sum(Option<usize>),
    Mean(Option<usize>),
    MaxReduce(Option<usize>),
    MinReduce(Option<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    BroadcastScalar(Shape),
    BroadcastRow(usize),
    BroadcastCol(usize),
    Reshape(Shape),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Abs => "abs",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::PowConst(_) => "pow",
            OpKind::ScaleConst(_) => "scale",
            OpKind::AddConst(_) => "add_const",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::MaxReduce(_) => "max_reduce",
            OpKind::MinReduce(_) => "min_reduce",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::BroadcastScalar(_) => "broadcast_scalar",
            OpKind::BroadcastRow(_) => "broadcast_row",
            OpKind::BroadcastCol(_) => "broadcast_col",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Matmul => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone)]
enum Inputs {
    None,
    One(u32),
    Two(u32, u32),
    Many(Vec<u32>),
}

impl Inputs {

    fn as_slice<'a>(&'a self, buf: &'a mut [u32; 2]) -> &'a [u32] {
        match self {
            Inputs::None => &[],
            Inputs::One(a) => {
                buf[0] = *a;
                &buf[..1]
            }
            Inputs::Two(a, b) => {
                buf[0] = *a;
                buf[1] = *b;
                &buf[..2]
            }
            Inputs::Many(v) => v,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    inputs: Inputs,
    value: NdArray,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    scratch_anc: Vec<bool>,
    scratch_dep: Vec<bool>,
    scratch_adj: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            scratch_anc: Vec::new(),
            scratch_dep: Vec::new(),
            scratch_adj: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes but keep allocation; previously issued `Var`s become
    /// invalid because the tape takes a fresh identity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = TAPE_IDS.fetch_add(1, Ordering::Relaxed);
    }

    /// Roll back to an earlier length. Vars above the cut become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &NdArray {
        assert_eq!(v.tape, self.id, "Var from a different tape generation");
        &self.nodes[v.id as usize].value
    }

    fn push(&mut self, op: OpKind, inputs: Inputs, value: NdArray) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, inputs, value });
        Var { tape: self.id, id }
    }

    /// Record an input value with no ancestors.
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(OpKind::Leaf, Inputs::None, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(NdArray::scalar(v))
    }

    fn check(&self, op: &OpKind, inputs: &[Var]) -> AdResult<()> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(AdError::Arity {
                    op: op.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(AdError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        for v in inputs {
            if v.tape != self.id || v.id as usize >= self.nodes.len() {
                return Err(AdError::TapeMismatch);
            }
        }
        Ok(())
    }

    fn eval(&self, op: &OpKind, inputs: &[Var]) -> AdResult<NdArray> {
        let val = |i: usize| &self.nodes[inputs[i].id as usize].value;
        match op {
            OpKind::Leaf => unreachable!("leaves are recorded via leaf()"),
            OpKind::StopGradient => Ok(val(0).clone()),
            OpKind::Add => val(0).zip_map(val(1), "add", |a, b| a + b),
            OpKind::Sub => val(0).zip_map(val(1), "sub", |a, b| a - b),
            OpKind::Mul => val(0).zip_map(val(1), "mul", |a, b| a * b),
            OpKind::Div => val(0).zip_map(val(1), "div", |a, b| a / b),
            OpKind::Neg => Ok(val(0).map(|a| -a)),
            OpKind::Abs => Ok(val(0).map(f64::abs)),
            OpKind::Sin => Ok(val(0).map(f64::sin)),
            OpKind::Cos => Ok(val(0).map(f64::cos)),
            OpKind::Sigmoid => Ok(val(0).map(|a| 1.0 / (1.0 + (-a).exp()))),
            OpKind::Tanh => Ok(val(0).map(f64::tanh)),
            OpKind::Log => Ok(val(0).map(f64::ln)),
            OpKind::Exp => Ok(val(0).map(f64::exp)),
            OpKind::Sqrt => Ok(val(0).map(f64::sqrt)),
            OpKind::PowConst(p) => {
                let p = *p;
                Ok(val(0).map(|a| a.powf(p)))
            }
            OpKind::ScaleConst(c) => {
                let c = *c;
                Ok(val(0).map(|a| a * c))
            }
            OpKind::AddConst(c) => {
                let c = *c;
                Ok(val(0).map(|a| a + c))
            }
            OpKind::Matmul => val(0).matmul(val(1)),
            OpKind::Transpose => val(0).transpose(),
            OpKind::Sum(axis) => val(0).sum_axis(*axis),
            OpKind::Mean(axis) => val(0).mean_axis(*axis),
            OpKind::MaxReduce(axis) => val(0).max_axis(*axis),
            OpKind::MinReduce(axis) => val(0).min_axis(*axis),
            OpKind::Concat(axis) => {
                let parts: Vec<&NdArray> = (0..inputs.len()).map(val).collect();
                NdArray::concat(&parts, *axis)
            }
            OpKind::Slice { axis, start, len } => val(0).slice(*axis, *start, *len),
            OpKind::BroadcastScalar(shape) => val(0).broadcast_scalar(shape.as_slice()),
            OpKind::BroadcastRow(rows) => val(0).broadcast_row(*rows),
            OpKind::BroadcastCol(cols) => val(0).broadcast_col(*cols),
            OpKind::Reshape(shape) => val(0).reshape(shape.as_slice()),
        }
    }

    /// Record one primitive. Shapes must conform to the primitive's rule.
    pub fn record(&mut self, op: OpKind, inputs: &[Var]) -> AdResult<Var> {
        self.check(&op, inputs)?;
        let value = self.eval(&op, inputs)?;
        let ids = match inputs {
            [] => Inputs::None,
            [a] => Inputs::One(a.id),
            [a, b] => Inputs::Two(a.id, b.id),
            many => Inputs::Many(many.iter().map(|v| v.id).collect()),
        };
        Ok(self.push(op, ids, value))
    }

    // -- ergonomic wrappers ------------------------------------------------

    /// Elementwise binary op with scalar auto-broadcast on either side.
    fn binary(&mut self, op: OpKind, a: Var, b: Var) -> AdResult<Var> {
        for v in [a, b] {
            if v.tape != self.id || v.id as usize >= self.nodes.len() {
                return Err(AdError::TapeMismatch);
            }
        }
        let (sa, sb) = (self.value(a).shape_tag(), self.value(b).shape_tag());
        let (a, b) = if sa == sb {
            (a, b)
        } else if sa.as_slice().is_empty() {
            (self.record(OpKind::BroadcastScalar(sb), &[a])?, b)
        } else if sb.as_slice().is_empty() {
            let b2 = self.record(OpKind::BroadcastScalar(sa), &[b])?;
            (a, b2)
        } else {
            (a, b)
        };
        self.record(op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.binary(OpKind::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Neg, &[a])
    }

    pub fn abs(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Abs, &[a])
    }

    pub fn sin(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Cos, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn log(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Log, &[a])
    }

    pub fn exp(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Sqrt, &[a])
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> AdResult<Var> {
        self.record(OpKind::PowConst(p), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.record(OpKind::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::Transpose, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> AdResult<Var> {
        self.record(OpKind::Sum(axis), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> AdResult<Var> {
        self.record(OpKind::Mean(axis), &[a])
    }

    pub fn max_reduce(&mut self, a: Var, axis: Option<usize>) -> AdResult<Var> {
        self.record(OpKind::MaxReduce(axis), &[a])
    }

    pub fn min_reduce(&mut self, a: Var, axis: Option<usize>) -> AdResult<Var> {
        self.record(OpKind::MinReduce(axis), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> AdResult<Var> {
        self.record(OpKind::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> AdResult<Var> {
        self.record(OpKind::Slice { axis, start, len }, &[a])
    }

    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> AdResult<Var> {
        self.record(OpKind::BroadcastScalar(Shape::from_slice(shape)?), &[a])
    }

    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> AdResult<Var> {
        self.record(OpKind::BroadcastRow(rows), &[a])
    }

    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> AdResult<Var> {
        self.record(OpKind::BroadcastCol(cols), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> AdResult<Var> {
        self.record(OpKind::Reshape(Shape::from_slice(shape)?), &[a])
    }

    pub fn stop_gradient(&mut self, a: Var) -> AdResult<Var> {
        self.record(OpKind::StopGradient, &[a])
    }

    /// Multiply elementwise by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> AdResult<Var> {
        self.record(OpKind::ScaleConst(c), &[a])
    }

    /// Add a compile-time constant elementwise.
    pub fn add_const(&mut self, a: Var, c: f64) -> AdResult<Var> {
        self.record(OpKind::AddConst(c), &[a])
    }

    /// Elementwise max(a, c) via (a + c + |a - c|) / 2; exact for a != c.
    pub fn clamp_min_const(&mut self, a: Var, c: f64) -> AdResult<Var> {
        let ac = self.add_const(a, c)?;
        let diff = self.add_const(a, -c)?;
        let ad = self.abs(diff)?;
        let s = self.add(ac, ad)?;
        self.scale(s, 0.5)
    }

    /// Numerically stable softplus: max(x,0) + log(1 + exp(-|x|)).
    pub fn softplus(&mut self, a: Var) -> AdResult<Var> {
        let ax = self.abs(a)?;
        let half_sum = self.add(a, ax)?;
        let relu = self.scale(half_sum, 0.5)?;
        let nax = self.neg(ax)?;
        let e = self.exp(nax)?;
        let e1 = self.add_const(e, 1.0)?;
        let l = self.log(e1)?;
        self.add(relu, l)
    }

    /// Squared Euclidean norm of all elements.
    pub fn sq_norm(&mut self, a: Var) -> AdResult<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq, None)
    }

    // -- reverse pass ------------------------------------------------------

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients stay connected to the
    /// tape and can be differentiated again. Without it the adjoint nodes
    /// are rolled back and the results re-enter as detached leaves.
    pub fn gradient(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> AdResult<Vec<Var>> {
        if output.tape != self.id || output.id as usize >= self.nodes.len() {
            return Err(AdError::TapeMismatch);
        }
        for v in wrt {
            if v.tape != self.id || v.id as usize >= self.nodes.len() {
                return Err(AdError::TapeMismatch);
            }
        }
        if !self.value(output).is_scalar() {
            return Err(AdError::NonScalarOutput {
                shape: self.value(output).shape().to_vec(),
            });
        }
        if wrt.is_empty() {
            return Ok(vec![]);
        }
        let pre_len = self.nodes.len();
        let out = output.id as usize;
        let lo = wrt.iter().map(|v| v.id as usize).min().unwrap().min(out);
        let span = out - lo + 1;

        // Span-relative marks: nodes that can influence the output, and
        // nodes that depend on some wrt var.
        let mut anc = std::mem::take(&mut self.scratch_anc);
        let mut dep = std::mem::take(&mut self.scratch_dep);
        anc.clear();
        anc.resize(span, false);
        dep.clear();
        dep.resize(span, false);
        anc[out - lo] = true;
        let mut buf = [0u32; 2];
        for j in (lo..=out).rev() {
            if anc[j - lo] {
                for &i in self.nodes[j].inputs.as_slice(&mut buf) {
                    let i = i as usize;
                    if i >= lo {
                        anc[i - lo] = true;
                    }
                }
            }
        }
        for v in wrt {
            let i = v.id as usize;
            if i <= out {
                dep[i - lo] = true;
            }
        }
        for j in lo..=out {
            if !dep[j - lo] {
                let node = &self.nodes[j];
                let mut any = false;
                for &i in node.inputs.as_slice(&mut buf) {
                    let i = i as usize;
                    if i >= lo && dep[i - lo] {
                        any = true;
                        break;
                    }
                }
                if any {
                    dep[j - lo] = true;
                }
            }
        }

        let mut adj = std::mem::take(&mut self.scratch_adj);
        adj.clear();
        adj.resize(span, None);
        adj[out - lo] = Some(self.scalar(1.0));

        for j in (lo..=out).rev() {
            if !(anc[j - lo] && dep[j - lo]) {
                continue;
            }
            let Some(u) = adj[j - lo] else { continue };
            let op = self.nodes[j].op;
            let mut ibuf = [0u32; 2];
            let mut stack = [0u32; 8];
            let heap: Vec<u32>;
            let ids: &[u32] = {
                let s = self.nodes[j].inputs.as_slice(&mut ibuf);
                if s.len() <= 8 {
                    stack[..s.len()].copy_from_slice(s);
                    &stack[..s.len()]
                } else {
                    heap = s.to_vec();
                    &heap
                }
            };
            let contribs = self.vjp(&op, ids, j as u32, u)?;
            for (&i, contrib) in ids.iter().zip(contribs) {
                let i = i as usize;
                let Some(c) = contrib else { continue };
                if i < lo || !(dep[i - lo] && anc[i - lo]) {
                    continue;
                }
                adj[i - lo] = Some(match adj[i - lo] {
                    Some(prev) => self.record(OpKind::Add, &[prev, c])?,
                    None => c,
                });
            }
        }

        let results: Vec<(Option<Var>, Vec<usize>)> = wrt
            .iter()
            .map(|v| {
                let id = v.id as usize;
                // vars recorded after the output cannot influence it
                let g = if id <= out { adj[id - lo] } else { None };
                (g, self.value(*v).shape().to_vec())
            })
            .collect();
        self.scratch_anc = anc;
        self.scratch_dep = dep;
        self.scratch_adj = adj;

        if create_graph {
            results
                .into_iter()
                .map(|(g, shape)| match g {
                    Some(g) => Ok(g),
                    None => Ok(self.leaf(NdArray::zeros(&shape))),
                })
                .collect()
        } else {
            let values: Vec<NdArray> = results
                .iter()
                .map(|(g, shape)| match g {
                    Some(g) => self.value(*g).clone(),
                    None => NdArray::zeros(shape),
                })
                .collect();
            self.truncate(pre_len);
            Ok(values.into_iter().map(|v| self.leaf(v)).collect())
        }
    }

    /// Vector-Jacobian product of one primitive, expressed in primitives.
    fn vjp(&mut self, op: &OpKind, ids: &[u32], out_id: u32, u: Var) -> AdResult<Vec<Option<Var>>> {
        let tid = self.id;
        let var = move |id: u32| Var { tape: tid, id };
        let out = var(out_id);
        let r = match op {
            OpKind::Leaf => vec![],
            OpKind::StopGradient => vec![None],
            OpKind::Add => vec![Some(u), Some(u)],
            OpKind::Sub => vec![Some(u), Some(self.neg(u)?)],
            OpKind::Mul => {
                let (a, b) = (var(ids[0]), var(ids[1]));
                vec![
                    Some(self.record(OpKind::Mul, &[u, b])?),
                    Some(self.record(OpKind::Mul, &[u, a])?),
                ]
            }
            OpKind::Div => {
                let b = var(ids[1]);
                let ga = self.record(OpKind::Div, &[u, b])?;
                let q_over_b = self.record(OpKind::Div, &[out, b])?;
                let gb_pos = self.record(OpKind::Mul, &[u, q_over_b])?;
                vec![Some(ga), Some(self.neg(gb_pos)?)]
            }
            OpKind::Neg => vec![Some(self.neg(u)?)],
            OpKind::Abs => {
                // Subgradient: sign(x) with sign(0) = 0. Constant w.r.t. x.
                let sign = self.value(var(ids[0])).map(|a| {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.leaf(sign);
                vec![Some(self.record(OpKind::Mul, &[u, s])?)]
            }
            OpKind::Sin => {
                let c = self.cos(var(ids[0]))?;
                vec![Some(self.record(OpKind::Mul, &[u, c])?)]
            }
            OpKind::Cos => {
                let s = self.sin(var(ids[0]))?;
                let us = self.record(OpKind::Mul, &[u, s])?;
                vec![Some(self.neg(us)?)]
            }
            OpKind::Sigmoid => {
                let y2 = self.record(OpKind::Mul, &[out, out])?;
                let d = self.record(OpKind::Sub, &[out, y2])?;
                vec![Some(self.record(OpKind::Mul, &[u, d])?)]
            }
            OpKind::Tanh => {
                let y2 = self.record(OpKind::Mul, &[out, out])?;
                let uy2 = self.record(OpKind::Mul, &[u, y2])?;
                vec![Some(self.record(OpKind::Sub, &[u, uy2])?)]
            }
            OpKind::Log => vec![Some(self.record(OpKind::Div, &[u, var(ids[0])])?)],
            OpKind::Exp => vec![Some(self.record(OpKind::Mul, &[u, out])?)],
            OpKind::Sqrt => {
                let two_y = self.record(OpKind::Add, &[out, out])?;
                vec![Some(self.record(OpKind::Div, &[u, two_y])?)]
            }
            OpKind::PowConst(p) => {
                let a = var(ids[0]);
                let pm1 = self.pow_const(a, p - 1.0)?;
                let scaled = self.scale(pm1, *p)?;
                vec![Some(self.record(OpKind::Mul, &[u, scaled])?)]
            }
            OpKind::ScaleConst(c) => vec![Some(self.scale(u, *c)?)],
            OpKind::AddConst(_) => vec![Some(u)],
            OpKind::Matmul => {
                let (a, b) = (var(ids[0]), var(ids[1]));
                let bt = self.transpose(b)?;
                let ga = self.record(OpKind::Matmul, &[u, bt])?;
                let at = self.transpose(a)?;
                let gb = self.record(OpKind::Matmul, &[at, u])?;
                vec![Some(ga), Some(gb)]
            }
            OpKind::Transpose => vec![Some(self.transpose(u)?)],
            OpKind::Sum(axis) => vec![Some(self.unreduce(u, var(ids[0]), *axis, 1.0)?)],
            OpKind::Mean(axis) => {
                let shape = self.value(var(ids[0])).shape().to_vec();
                let count = match axis {
                    None => shape.iter().product::<usize>(),
                    Some(ax) => shape[*ax],
                } as f64;
                vec![Some(self.unreduce(u, var(ids[0]), *axis, 1.0 / count)?)]
            }
            OpKind::MaxReduce(axis) | OpKind::MinReduce(axis) => {
                let input = var(ids[0]);
                let mask = self.extremum_mask(input, out, *axis, matches!(op, OpKind::MaxReduce(_)));
                let m = self.leaf(mask);
                let spread = self.unreduce(u, input, *axis, 1.0)?;
                vec![Some(self.record(OpKind::Mul, &[spread, m])?)]
            }
            OpKind::Concat(axis) => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(ids.len());
                for &i in ids {
                    let extent = {
                        let s = self.value(var(i)).shape();
                        if s.is_empty() {
                            1
                        } else {
                            s[*axis.min(&(s.len() - 1))]
                        }
                    };
                    let g = self.slice(u, *axis, offset, extent)?;
                    // rank-0 parts of a rank-1 concat come back as length-1 vectors
                    let g = if self.value(var(i)).is_scalar() {
                        self.reshape(g, &[])?
                    } else {
                        g
                    };
                    grads.push(Some(g));
                    offset += extent;
                }
                grads
            }
            OpKind::Slice { axis, start, len } => {
                let in_shape = self.value(var(ids[0])).shape().to_vec();
                let total = in_shape[*axis];
                let mut parts: Vec<Var> = Vec::new();
                if *start > 0 {
                    let mut s = in_shape.clone();
                    s[*axis] = *start;
                    parts.push(self.leaf(NdArray::zeros(&s)));
                }
                parts.push(u);
                if start + len < total {
                    let mut s = in_shape.clone();
                    s[*axis] = total - start - len;
                    parts.push(self.leaf(NdArray::zeros(&s)));
                }
                let g = if parts.len() == 1 {
                    u
                } else {
                    self.concat(&parts, *axis)?
                };
                vec![Some(g)]
            }
            OpKind::BroadcastScalar(_) => vec![Some(self.sum(u, None)?)],
            OpKind::BroadcastRow(_) => vec![Some(self.sum(u, Some(0))?)],
            OpKind::BroadcastCol(_) => vec![Some(self.sum(u, Some(1))?)],
            OpKind::Reshape(_) => {
                let shape = self.value(var(ids[0])).shape().to_vec();
                vec![Some(self.reshape(u, &shape)?)]
            }
        };
        Ok(r)
    }

    /// Broadcast a reduction adjoint back to the input's shape, scaled.
    fn unreduce(&mut self, u: Var, input: Var, axis: Option<usize>, factor: f64) -> AdResult<Var> {
        let shape = self.value(input).shape().to_vec();
        let spread = match axis {
            None => self.broadcast_scalar(u, &shape)?,
            Some(0) => self.broadcast_row(u, shape[0])?,
            Some(_) => self.broadcast_col(u, shape[1])?,
        };
        if factor == 1.0 {
            Ok(spread)
        } else {
            self.scale(spread, factor)
        }
    }

    /// Indicator of the reduced extremum; ties go to the lowest index.
    fn extremum_mask(&self, input: Var, out: Var, axis: Option<usize>, is_max: bool) -> NdArray {
        let x = self.value(input);
        let y = self.value(out);
        let shape = x.shape().to_vec();
        let mut mask = vec![0.0; x.len()];
        fn pick(cands: impl Iterator<Item = usize>, target: f64, data: &[f64]) -> Option<usize> {
            for i in cands {
                if data[i] == target {
                    return Some(i);
                }
            }
            None
        }
        let data = x.data();
        match axis {
            None => {
                if let Some(i) = pick(0..data.len(), y.item(), data) {
                    mask[i] = 1.0;
                }
            }
            Some(0) => {
                let (m, n) = (shape[0], shape[1]);
                for j in 0..n {
                    let t = y.data()[j];
                    if let Some(i) = pick((0..m).map(|r| r * n + j), t, data) {
                        mask[i] = 1.0;
                    }
                }
            }
            Some(_) => {
                let (m, n) = (shape[0], shape[1]);
                for i in 0..m {
                    let t = y.data()[i];
                    if let Some(k) = pick((0..n).map(|c| i * n + c), t, data) {
                        mask[k] = 1.0;
                    }
                }
            }
        }
        let _ = is_max;
        NdArray::from_vec(shape, mask).expect("mask shape")
    }
}
