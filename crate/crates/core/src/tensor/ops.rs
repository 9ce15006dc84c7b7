use super::{silu, Result, Tensor, TensorError};

/// The operation set shared by every evaluation backend.
///
/// Networks, losses and oracles are written once against this trait and then run
/// on [`Eval`] (values only), [`Graph`](super::Graph) (reverse mode) or
/// [`Forward`](super::Forward) (forward mode).
pub trait Ops {
    type V: Clone;

    /// A value that is never differentiated.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A trainable parameter. Only the graph backend treats it differently from
    /// a constant.
    fn param(&mut self, t: &Tensor) -> Self::V;
    /// Primal value of `v`.
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, k: f64) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
    fn sum_last(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    fn sin(&mut self, a: &Self::V) -> Self::V;
    fn cos(&mut self, a: &Self::V) -> Self::V;
    fn sqrt(&mut self, a: &Self::V) -> Self::V;
    fn stop_gradient(&mut self, a: &Self::V) -> Self::V;
    /// Round to the nearest integer. Has no derivative; the differentiating
    /// backends reject it.
    fn round(&mut self, a: &Self::V) -> Result<Self::V>;

    fn square(&mut self, a: &Self::V) -> Result<Self::V> {
        self.mul(a, a)
    }

    /// `x @ w + b`, the affine layer used throughout the networks.
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        let xw = self.matmul(x, w)?;
        self.add_row(&xw, b)
    }
}

/// Plain evaluation: values are tensors, nothing is recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }
    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.div(b)
    }
    fn scale(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.scale(k)
    }
    fn add_scalar(&mut self, a: &Tensor, k: f64) -> Tensor {
        a.add_scalar(k)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        x.add_row(bias)
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        a.sum()
    }
    fn mean(&mut self, a: &Tensor) -> Tensor {
        a.mean()
    }
    fn sum_last(&mut self, a: &Tensor) -> Tensor {
        a.sum_last()
    }
    fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        Tensor::concat(parts, axis)
    }
    fn silu(&mut self, a: &Tensor) -> Tensor {
        a.map(silu)
    }
    fn sin(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::sin)
    }
    fn cos(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::cos)
    }
    fn sqrt(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::sqrt)
    }
    fn stop_gradient(&mut self, a: &Tensor) -> Tensor {
        a.clone()
    }
    fn round(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(f64::round))
    }
}

pub(crate) fn non_differentiable<T>(op: &'static str) -> Result<T> {
    Err(TensorError::NonDifferentiable { op })
}
