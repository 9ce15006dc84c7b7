//! Forward-mode differentiation with dual tensors.
//!
//! A [`DualTensor`] carries a primal value and its tangent (the directional
//! derivative along the seeded input direction). Every operation propagates both
//! in the same pass, so one call to [`jvp`] costs about two forward evaluations
//! and never touches a [`Graph`](super::Graph).

use std::borrow::Cow;

use super::ops::non_differentiable;
use super::{silu, silu_grad, Ops, Result, Tensor, TensorError};

/// Primal value plus tangent. A missing tangent stands for an all-zero one and
/// lets constants (parameters, conditioning) skip their half of the work.
#[derive(Debug, Clone)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Option<Tensor>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dual",
                lhs: primal.shape().to_vec(),
                rhs: tangent.shape().to_vec(),
            });
        }
        Ok(Self {
            primal,
            tangent: Some(tangent),
        })
    }

    pub fn constant(primal: Tensor) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> Cow<'_, Tensor> {
        match &self.tangent {
            Some(t) => Cow::Borrowed(t),
            None => Cow::Owned(Tensor::zeros(self.primal.shape())),
        }
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        let tangent = match self.tangent {
            Some(t) => t,
            None => Tensor::zeros(self.primal.shape()),
        };
        (self.primal, tangent)
    }

    fn with(primal: Tensor, tangent: Option<Tensor>) -> Self {
        Self { primal, tangent }
    }
}

/// Forward-mode backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Forward;

/// Sum of two optional tangents.
fn add_opt(a: Option<Tensor>, b: Option<Tensor>, shape: &[usize]) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (None, None) => None,
        (Some(x), None) | (None, Some(x)) => Some(x.expand_to(shape)),
        (Some(x), Some(y)) => Some(x.add(&y)?.expand_to(shape)),
    })
}

impl Ops for Forward {
    type V = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }
    fn param(&mut self, t: &Tensor) -> DualTensor {
        DualTensor::constant(t.clone())
    }
    fn value<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.primal
    }
    fn add(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = a.primal.add(&b.primal)?;
        let t = add_opt(a.tangent.clone(), b.tangent.clone(), p.shape())?;
        Ok(DualTensor::with(p, t))
    }
    fn sub(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = a.primal.sub(&b.primal)?;
        let t = add_opt(a.tangent.clone(), b.tangent.as_ref().map(Tensor::neg), p.shape())?;
        Ok(DualTensor::with(p, t))
    }
    fn mul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = a.primal.mul(&b.primal)?;
        let ta = a.tangent.as_ref().map(|t| t.mul(&b.primal)).transpose()?;
        let tb = b.tangent.as_ref().map(|t| a.primal.mul(t)).transpose()?;
        let t = add_opt(ta, tb, p.shape())?;
        Ok(DualTensor::with(p, t))
    }
    fn div(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = a.primal.div(&b.primal)?;
        let ta = a.tangent.as_ref().map(|t| t.div(&b.primal)).transpose()?;
        // d(a/b) along tb = -(a/b) * tb / b
        let tb = b
            .tangent
            .as_ref()
            .map(|t| p.mul(t)?.div(&b.primal).map(|x| x.neg()))
            .transpose()?;
        let t = add_opt(ta, tb, p.shape())?;
        Ok(DualTensor::with(p, t))
    }
    fn scale(&mut self, a: &DualTensor, k: f64) -> DualTensor {
        DualTensor::with(a.primal.scale(k), a.tangent.as_ref().map(|t| t.scale(k)))
    }
    fn add_scalar(&mut self, a: &DualTensor, k: f64) -> DualTensor {
        DualTensor::with(a.primal.add_scalar(k), a.tangent.clone())
    }
    fn matmul(&mut self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let p = a.primal.matmul(&b.primal)?;
        let ta = a.tangent.as_ref().map(|t| t.matmul(&b.primal)).transpose()?;
        let tb = b.tangent.as_ref().map(|t| a.primal.matmul(t)).transpose()?;
        let t = add_opt(ta, tb, p.shape())?;
        Ok(DualTensor::with(p, t))
    }
    fn add_row(&mut self, x: &DualTensor, bias: &DualTensor) -> Result<DualTensor> {
        let p = x.primal.add_row(&bias.primal)?;
        let t = match (&x.tangent, &bias.tangent) {
            (None, None) => None,
            (Some(tx), None) => Some(tx.clone()),
            (None, Some(tb)) => Some(Tensor::zeros(p.shape()).add_row(tb)?),
            (Some(tx), Some(tb)) => Some(tx.add_row(tb)?),
        };
        Ok(DualTensor::with(p, t))
    }
    fn sum(&mut self, a: &DualTensor) -> DualTensor {
        DualTensor::with(a.primal.sum(), a.tangent.as_ref().map(Tensor::sum))
    }
    fn mean(&mut self, a: &DualTensor) -> DualTensor {
        DualTensor::with(a.primal.mean(), a.tangent.as_ref().map(Tensor::mean))
    }
    fn sum_last(&mut self, a: &DualTensor) -> DualTensor {
        DualTensor::with(a.primal.sum_last(), a.tangent.as_ref().map(Tensor::sum_last))
    }
    fn concat(&mut self, parts: &[DualTensor], axis: usize) -> Result<DualTensor> {
        let primals: Vec<Tensor> = parts.iter().map(|p| p.primal.clone()).collect();
        let p = Tensor::concat(&primals, axis)?;
        let t = if parts.iter().any(DualTensor::has_tangent) {
            let tangents: Vec<Tensor> = parts.iter().map(|d| d.tangent().into_owned()).collect();
            Some(Tensor::concat(&tangents, axis)?)
        } else {
            None
        };
        Ok(DualTensor::with(p, t))
    }
    fn silu(&mut self, a: &DualTensor) -> DualTensor {
        let t = a
            .tangent
            .as_ref()
            .map(|t| t.zip("silu", &a.primal, |dt, x| dt * silu_grad(x)).expect("same shape"));
        DualTensor::with(a.primal.map(silu), t)
    }
    fn sin(&mut self, a: &DualTensor) -> DualTensor {
        let t = a
            .tangent
            .as_ref()
            .map(|t| t.zip("sin", &a.primal, |dt, x| dt * x.cos()).expect("same shape"));
        DualTensor::with(a.primal.map(f64::sin), t)
    }
    fn cos(&mut self, a: &DualTensor) -> DualTensor {
        let t = a
            .tangent
            .as_ref()
            .map(|t| t.zip("cos", &a.primal, |dt, x| -dt * x.sin()).expect("same shape"));
        DualTensor::with(a.primal.map(f64::cos), t)
    }
    fn sqrt(&mut self, a: &DualTensor) -> DualTensor {
        let p = a.primal.map(f64::sqrt);
        let t = a
            .tangent
            .as_ref()
            .map(|t| t.zip("sqrt", &p, |dt, y| 0.5 * dt / y).expect("same shape"));
        DualTensor::with(p, t)
    }
    fn stop_gradient(&mut self, a: &DualTensor) -> DualTensor {
        DualTensor::constant(a.primal.clone())
    }
    fn round(&mut self, _a: &DualTensor) -> Result<DualTensor> {
        non_differentiable("round")
    }
}

/// Jacobian-vector product of `f` at `inputs` along `tangents`.
///
/// `f` receives the inputs as dual tensors seeded with the given tangents and
/// must build its output from [`Forward`] operations. Returns `(f(x), J_f(x) v)`.
pub fn jvp<F, E>(inputs: &[Tensor], tangents: &[Tensor], f: F) -> std::result::Result<(Tensor, Tensor), E>
where
    F: FnOnce(&mut Forward, &[DualTensor]) -> std::result::Result<DualTensor, E>,
    E: From<TensorError>,
{
    if inputs.len() != tangents.len() {
        return Err(TensorError::ShapeMismatch {
            op: "jvp",
            lhs: vec![inputs.len()],
            rhs: vec![tangents.len()],
        }
        .into());
    }
    let seeded = inputs
        .iter()
        .zip(tangents)
        .map(|(x, v)| DualTensor::new(x.clone(), v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut Forward, &seeded)?;
    Ok(out.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes_tangent_through() {
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let v = Tensor::from_fn(&[3], |i| 2.0 - i as f64);
        let (p, t) = jvp::<_, TensorError>(&[x.clone()], &[v.clone()], |_, xs| Ok(xs[0].clone())).unwrap();
        assert_eq!(p, x);
        assert_eq!(t, v);
    }

    #[test]
    fn square_at_three() {
        let (p, t) = jvp::<_, TensorError>(&[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)], |fw, xs| {
            fw.mul(&xs[0], &xs[0])
        })
        .unwrap();
        assert_eq!(p.item(), Some(9.0));
        assert_eq!(t.item(), Some(6.0));
    }

    #[test]
    fn stop_gradient_zeroes_tangent() {
        let x = Tensor::from_fn(&[2], |i| i as f64 + 0.5);
        let (p, t) = jvp::<_, TensorError>(&[x.clone()], &[Tensor::ones(&[2])], |fw, xs| {
            Ok(fw.stop_gradient(&xs[0]))
        })
        .unwrap();
        assert_eq!(p, x);
        assert_eq!(t, Tensor::zeros(&[2]));
    }

    #[test]
    fn round_is_rejected_at_trace_time() {
        let r = jvp::<_, TensorError>(&[Tensor::scalar(0.4)], &[Tensor::scalar(1.0)], |fw, xs| fw.round(&xs[0]));
        assert!(matches!(r, Err(TensorError::NonDifferentiable { op: "round" })));
    }

    #[test]
    fn tangent_shape_must_match() {
        let r = jvp::<_, TensorError>(&[Tensor::zeros(&[2])], &[Tensor::zeros(&[3])], |_, xs| Ok(xs[0].clone()));
        assert!(r.is_err());
    }

    #[test]
    fn zero_tangent_stays_zero() {
        let x = Tensor::from_fn(&[2, 2], |i| i as f64 * 0.1);
        let w = Tensor::from_fn(&[2, 2], |i| 1.0 - i as f64);
        let (_, t) = jvp::<_, TensorError>(&[x], &[Tensor::zeros(&[2, 2])], |fw, xs| {
            let wc = fw.param(&w);
            let h = fw.matmul(&xs[0], &wc)?;
            let h = fw.silu(&h);
            let s = fw.sin(&h);
            Ok(fw.sum(&s))
        })
        .unwrap();
        assert_eq!(t.item(), Some(0.0));
    }
}
