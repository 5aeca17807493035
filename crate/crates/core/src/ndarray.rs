//! Dense row-major arrays of 64-bit floats.
//!
//! `NdArray` is the universal value type: rank 0 scalars, rank 1 vectors,
//! rank 2 matrices. All arithmetic used by the tape lives here as plain
//! kernels so forward evaluation and recorded replay share one code path.

use crate::error::{AdError, AdResult};
use rand::Rng;
use std::sync::Arc;

/// Inline shape for ranks 0..=3; avoids a heap allocation per array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn scalar() -> Shape {
        Shape { dims: [0; 3], rank: 0 }
    }

    pub fn vector(n: usize) -> Shape {
        Shape { dims: [n, 0, 0], rank: 1 }
    }

    pub fn matrix(m: usize, n: usize) -> Shape {
        Shape { dims: [m, n, 0], rank: 2 }
    }

    pub fn from_slice(dims: &[usize]) -> AdResult<Shape> {
        if dims.len() > 3 {
            return Err(AdError::InvalidShape {
                op: "shape",
                shape: dims.to_vec(),
                reason: "rank above 3 unsupported".into(),
            });
        }
        let mut out = [0usize; 3];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: out,
            rank: dims.len() as u8,
        })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn len(&self) -> usize {
        self.as_slice().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shape-tagged buffer of f64 in row-major order.
///
/// The buffer is shared on clone, so importing the same constant onto many
/// tapes is a refcount bump rather than a copy.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl NdArray {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> AdResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AdError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(NdArray {
            shape: Shape::from_slice(&shape)?,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        NdArray {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        NdArray {
            shape: Shape::scalar(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let shape = Shape::from_slice(shape).expect("rank <= 3");
        let n = shape.len();
        NdArray {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let shape = Shape::from_slice(shape).expect("rank <= 3");
        let n = shape.len();
        NdArray {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        NdArray {
            shape: Shape::vector(data.len()),
            data: Arc::new(data),
        }
    }

    /// Standard normal draws scaled by `std`.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let shape = Shape::from_slice(shape).expect("rank <= 3");
        let n = shape.len();
        let data = (0..n).map(|_| crate::rng::normal(rng) * std).collect();
        NdArray {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.as_slice()
    }

    pub(crate) fn shape_tag(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.as_slice().len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.as_slice().is_empty()
    }

    /// Value of a rank-0 array. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar array of shape {:?}",
            self.shape()
        );
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &NdArray, op: &'static str, f: impl Fn(f64, f64) -> f64) -> AdResult<NdArray> {
        if self.shape != other.shape {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(NdArray {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    /// Same buffer under a new shape (zero copy).
    pub fn reshape(&self, shape: &[usize]) -> AdResult<NdArray> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AdError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", n, self.data.len()),
            });
        }
        Ok(NdArray {
            shape: Shape::from_slice(shape)?,
            data: Arc::clone(&self.data),
        })
    }

    /// Matrix product of two rank-2 arrays.
    pub fn matmul(&self, other: &NdArray) -> AdResult<NdArray> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                for (d, &r) in dst.iter_mut().zip(row) {
                    *d += a * r;
                }
            }
        }
        Ok(NdArray::from_parts(Shape::matrix(m, n), out))
    }

    pub fn transpose(&self) -> AdResult<NdArray> {
        if self.rank() != 2 {
            return Err(AdError::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "rank 2 required".into(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; m * n];
        for (i, row) in self.data.chunks_exact(n).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[j * m + i] = v;
            }
        }
        Ok(NdArray::from_parts(Shape::matrix(n, m), out))
    }

    fn reduce(
        &self,
        axis: Option<usize>,
        op: &'static str,
        init: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> AdResult<NdArray> {
        match axis {
            None => {
                let v = self.data.iter().fold(init, |acc, &x| f(acc, x));
                Ok(NdArray::scalar(v))
            }
            Some(ax) => {
                if self.rank() != 2 || ax > 1 {
                    return Err(AdError::InvalidShape {
                        op,
                        shape: self.shape().to_vec(),
                        reason: format!("axis {ax} requires a rank-2 array"),
                    });
                }
                let (m, n) = (self.shape()[0], self.shape()[1]);
                if ax == 0 {
                    let mut out = vec![init; n];
                    for i in 0..m {
                        for (j, slot) in out.iter_mut().enumerate() {
                            *slot = f(*slot, self.data[i * n + j]);
                        }
                    }
                    Ok(NdArray::from_parts(Shape::vector(n), out))
                } else {
                    let mut out = vec![init; m];
                    for (i, slot) in out.iter_mut().enumerate() {
                        for j in 0..n {
                            *slot = f(*slot, self.data[i * n + j]);
                        }
                    }
                    Ok(NdArray::from_parts(Shape::vector(m), out))
                }
            }
        }
    }

    pub fn sum_axis(&self, axis: Option<usize>) -> AdResult<NdArray> {
        self.reduce(axis, "sum", 0.0, |a, b| a + b)
    }

    pub fn mean_axis(&self, axis: Option<usize>) -> AdResult<NdArray> {
        let count = match axis {
            None => self.data.len(),
            Some(0) => self.shape()[0],
            Some(_) => *self.shape().get(1).unwrap_or(&1),
        } as f64;
        let s = self.sum_axis(axis)?;
        Ok(s.map(|v| v / count))
    }

    pub fn max_axis(&self, axis: Option<usize>) -> AdResult<NdArray> {
        self.reduce(axis, "max", f64::NEG_INFINITY, f64::max)
    }

    pub fn min_axis(&self, axis: Option<usize>) -> AdResult<NdArray> {
        self.reduce(axis, "min", f64::INFINITY, f64::min)
    }

    /// Concatenate along `axis` (0 or 1). Rank-1 arrays concat along 0 only.
    pub fn concat(parts: &[&NdArray], axis: usize) -> AdResult<NdArray> {
        assert!(!parts.is_empty(), "concat of zero arrays");
        let first = parts[0];
        if axis == 0 && first.rank() <= 1 {
            let mut data = Vec::new();
            for p in parts {
                if p.rank() > 1 {
                    return Err(AdError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                data.extend_from_slice(&p.data);
            }
            Ok(NdArray::vector(data))
        } else {
            // rank-2 concat
            for p in parts {
                if p.rank() != 2 || p.shape()[1 - axis] != first.shape()[1 - axis] {
                    return Err(AdError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            if axis == 0 {
                let n = first.shape()[1];
                let m: usize = parts.iter().map(|p| p.shape()[0]).sum();
                let mut data = Vec::with_capacity(m * n);
                for p in parts {
                    data.extend_from_slice(&p.data);
                }
                Ok(NdArray::from_parts(Shape::matrix(m, n), data))
            } else {
                let m = first.shape()[0];
                let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for p in parts {
                        let w = p.shape()[1];
                        data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                Ok(NdArray::from_parts(Shape::matrix(m, n), data))
            }
        }
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> AdResult<NdArray> {
        let bad = |reason: String| AdError::InvalidShape {
            op: "slice",
            shape: self.shape().to_vec(),
            reason,
        };
        match self.rank() {
            1 => {
                if axis != 0 || start + len > self.shape()[0] {
                    return Err(bad(format!("slice {start}+{len} axis {axis}")));
                }
                Ok(NdArray::vector(self.data[start..start + len].to_vec()))
            }
            2 => {
                let (m, n) = (self.shape()[0], self.shape()[1]);
                if axis == 0 {
                    if start + len > m {
                        return Err(bad(format!("rows {start}+{len}")));
                    }
                    Ok(NdArray::from_parts(
                        Shape::matrix(len, n),
                        self.data[start * n..(start + len) * n].to_vec(),
                    ))
                } else {
                    if start + len > n {
                        return Err(bad(format!("cols {start}+{len}")));
                    }
                    let mut data = Vec::with_capacity(m * len);
                    for i in 0..m {
                        data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
                    }
                    Ok(NdArray::from_parts(Shape::matrix(m, len), data))
                }
            }
            r => Err(bad(format!("rank {r} unsupported"))),
        }
    }

    /// Scalar broadcast to an arbitrary shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> AdResult<NdArray> {
        if !self.is_scalar() {
            return Err(AdError::InvalidShape {
                op: "broadcast_scalar",
                shape: self.shape().to_vec(),
                reason: "source must be scalar".into(),
            });
        }
        Ok(NdArray::filled(shape, self.data[0]))
    }

    /// Length-n vector repeated as `rows` rows of an `rows x n` matrix.
    pub fn broadcast_row(&self, rows: usize) -> AdResult<NdArray> {
        if self.rank() != 1 {
            return Err(AdError::InvalidShape {
                op: "broadcast_row",
                shape: self.shape().to_vec(),
                reason: "source must be rank 1".into(),
            });
        }
        let n = self.shape()[0];
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Ok(NdArray::from_parts(Shape::matrix(rows, n), data))
    }

    /// Length-m vector repeated as `cols` columns of an `m x cols` matrix.
    pub fn broadcast_col(&self, cols: usize) -> AdResult<NdArray> {
        if self.rank() != 1 {
            return Err(AdError::InvalidShape {
                op: "broadcast_col",
                shape: self.shape().to_vec(),
                reason: "source must be rank 1".into(),
            });
        }
        let m = self.shape()[0];
        let mut data = Vec::with_capacity(m * cols);
        for i in 0..m {
            for _ in 0..cols {
                data.push(self.data[i]);
            }
        }
        Ok(NdArray::from_parts(Shape::matrix(m, cols), data))
    }
}
