//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: its shape never changes and its buffer is
//! shared behind an `Arc`, so cloning is cheap and tensors can be read from many
//! threads at once. Every kernel returns a fresh tensor.
//!
//! Differentiation lives in the backends built on top of these kernels:
//! [`Graph`] records operations for reverse mode, [`Forward`] propagates
//! [`DualTensor`]s for Jacobian-vector products, and [`Eval`] just computes values.
//! Code written against the [`Ops`] trait runs unchanged on all three.

mod dual;
mod graph;
mod ops;

pub use dual::{jvp, DualTensor, Forward};
pub use graph::{Gradients, Graph, Var};
pub use ops::{Eval, Ops};

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::par;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("operation `{op}` has no derivative")]
    NonDifferentiable { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("concatenation of zero tensors")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= SHOW {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " {:?}..", &self.data[..SHOW])
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::raw(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: &[f64]) -> Self {
        Self::raw(vec![values.len(), 1], values.to_vec())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Standard-normal entries drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all axes after the first.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Self {
        self.map(|v| v + k)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip("mul", other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip("div", other, |a, b| a / b)
    }

    /// Elementwise combination with trailing-singleton broadcasting.
    ///
    /// Either operand may be "collapsed": equal to the other's shape on a prefix of
    /// axes and 1 on every axis after it (a rank-0 scalar collapses everything).
    pub fn zip(&self, op: &'static str, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let n: usize = out_shape.iter().product();
        let a = &self.data;
        let b = &other.data;
        let data = if a.len() == n && b.len() == n {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let da = block(n, a.len());
            let db = block(n, b.len());
            (0..n).map(|i| f(a[i / da], b[i / db])).collect()
        };
        Ok(Self::raw(out_shape, data))
    }

    /// Sum a broadcast result back down to `shape` (adjoint of broadcasting).
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let target: usize = shape.iter().product();
        let blk = block(self.len(), target);
        let data = self
            .data
            .chunks(blk.max(1))
            .map(|c| c.iter().sum())
            .collect();
        Self::raw(shape.to_vec(), data)
    }

    /// Expand a collapsed tensor to `shape` (inverse view of `reduce_to`).
    pub(crate) fn expand_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let n: usize = shape.iter().product();
        let blk = block(n, self.len());
        Self::raw(shape.to_vec(), (0..n).map(|i| self.data[i / blk]).collect())
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Self {
        Self::scalar(self.data.iter().sum::<f64>() / self.len() as f64)
    }

    /// Sum over the last axis, keeping it as size 1: `[.., n] -> [.., 1]`.
    pub fn sum_last(&self) -> Self {
        let Some(&w) = self.shape.last() else {
            return self.clone();
        };
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = 1;
        let data = if w == 0 {
            vec![0.0; shape.iter().product()]
        } else {
            self.data.chunks(w).map(|c| c.iter().sum()).collect()
        };
        Self::raw(shape, data)
    }

    /// Column sums of a rank-2 tensor, `[m, n] -> [n]`.
    pub fn sum_rows(&self) -> Result<Self> {
        let (m, n) = self.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Ok(Self::raw(vec![n], out))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::raw(vec![n, m], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = gemm(m, k, n, (&self.data, k, 1), (&other.data, n, 1));
        Ok(Self::raw(vec![m, n], data))
    }

    /// `self^T @ other` without materialising the transpose.
    pub(crate) fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = other.dims2("matmul_tn")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = gemm(m, k, n, (&self.data, 1, m), (&other.data, n, 1));
        Ok(Self::raw(vec![m, n], data))
    }

    /// `self @ other^T` without materialising the transpose.
    pub(crate) fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = gemm(m, k, n, (&self.data, k, 1), (&other.data, 1, k));
        Ok(Self::raw(vec![m, n], data))
    }

    /// Add a bias row to every row: `[m, n] + [n]`.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (_, n) = self.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias.data[i % n.max(1)])
            .collect();
        Ok(Self::raw(self.shape.clone(), data))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        if axis >= first.rank() {
            return Err(TensorError::Axis {
                axis,
                shape: first.shape.clone(),
            });
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            out_shape[axis] += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let w = p.len() / outer.max(1);
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        Ok(Self::raw(out_shape, data))
    }

    /// Inverse of [`Tensor::concat`]: cut `self` along `axis` into the given sizes.
    pub(crate) fn split(&self, axis: usize, sizes: &[usize]) -> Vec<Self> {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let total_w = self.shape[axis] * inner;
        let mut offset = 0;
        sizes
            .iter()
            .map(|&sz| {
                let w = sz * inner;
                let mut data = Vec::with_capacity(outer * w);
                for o in 0..outer {
                    let start = o * total_w + offset;
                    data.extend_from_slice(&self.data[start..start + w]);
                }
                offset += w;
                let mut shape = self.shape.clone();
                shape[axis] = sz;
                Self::raw(shape, data)
            })
            .collect()
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::raw(shape, self.data[start * w..end * w].to_vec())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack_rows(rows: &[Self]) -> Result<Self> {
        let first = rows.first().ok_or(TensorError::EmptyConcat)?;
        let mut data = Vec::with_capacity(rows.len() * first.len());
        for r in rows {
            if r.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first.shape.clone(),
                    rhs: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::raw(shape, data))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian bytes of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn block(n: usize, len: usize) -> usize {
    if len == 0 {
        1
    } else {
        n / len
    }
}

fn collapses_into(small: &[usize], big: &[usize]) -> bool {
    if small.is_empty() {
        return true;
    }
    if small.len() != big.len() {
        return false;
    }
    let k = small
        .iter()
        .zip(big)
        .take_while(|(a, b)| a == b)
        .count();
    small[k..].iter().all(|&d| d == 1)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || collapses_into(b, a) {
        Ok(a.to_vec())
    } else if collapses_into(a, b) {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Rows of the output handed to one worker. Fixed so the floating-point work per
/// row is identical regardless of thread count.
const GEMM_ROW_CHUNK: usize = 32;

/// `C[m,n] = A[m,k] @ B[k,n]` with explicit (row, column) strides for A and B.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    par::for_each_chunk_mut(&mut c, GEMM_ROW_CHUNK * n, |chunk_idx, out| {
        let row0 = chunk_idx * GEMM_ROW_CHUNK;
        let rows = out.len() / n;
        // SAFETY: the A pointer is offset to row `row0` and the kernel reads `rows`
        // rows of `k` columns at the given strides, all inside `a`; `b` is read in
        // full; `out` holds exactly `rows * n` elements written with row stride n.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_componentwise() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 3], &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_against_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[70, 13], &mut rng);
        let b = Tensor::randn(&[13, 9], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..70 {
            for j in 0..9 {
                let naive: f64 = (0..13).map(|p| a.data()[i * 13 + p] * b.data()[p * 9 + j]).sum();
                assert!((c.data()[i * 9 + j] - naive).abs() < 1e-12);
            }
        }
        let at = a.transpose().unwrap();
        let via_tn = at.matmul_tn(&at).unwrap();
        let direct = a.matmul(&at).unwrap();
        assert!(via_tn.max_abs_diff(&direct) < 1e-12);
        let via_nt = a.matmul_nt(&a).unwrap();
        assert!(via_nt.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn mean_of_normal_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Tensor::randn(&[1000], &mut rng).mean().item().unwrap();
        assert!(m.abs() < 0.1, "mean {m}");
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(a.matmul(&Tensor::zeros(&[2, 2])).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn trailing_broadcast_only() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let col = Tensor::column(&[10.0, 20.0]);
        let out = a.add(&col).unwrap();
        assert_eq!(out.data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
        assert_eq!(col.mul(&a).unwrap().shape(), &[2, 3]);
        // a leading singleton is not a trailing one
        let row = Tensor::zeros(&[1, 3]);
        assert!(a.add(&row).is_err());
        assert_eq!(out.reduce_to(&[2, 1]).data(), &[33.0, 72.0]);
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.row(1), &[2.0, 3.0, 13.0, 14.0, 15.0]);
        let parts = c.split(1, &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(Tensor::concat(&[a, Tensor::zeros(&[3, 1])], 1).is_err());
    }

    #[test]
    fn reductions() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(a.sum().item(), Some(15.0));
        assert_eq!(a.sum_last().data(), &[3.0, 12.0]);
        assert_eq!(a.sum_rows().unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(a.mean().item(), Some(2.5));
    }
}
