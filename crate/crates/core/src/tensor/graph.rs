//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended as operations run, so index order is already a topological
//! order and the backward sweep is a single reverse pass that visits each node at
//! most once. Nodes that cannot reach a parameter leaf (constants, anything behind
//! `stop_gradient`) never receive or pass on a gradient.

use super::ops::non_differentiable;
use super::{silu_grad, Ops, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat(Vec<usize>, usize),
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    ///
    /// A loss that does not depend on any leaf (a constant, or something detached
    /// by `stop_gradient`) yields all-zero gradients rather than an error.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.val(loss);
        if loss_val.len() != 1 {
            return Err(TensorError::NotScalar(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::ones(loss_val.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |i: usize, contrib: Tensor| -> Result<()> {
            if !self.nodes[i].requires_grad {
                return Ok(());
            }
            let slot = &mut grads[i];
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&contrib)?,
                None => contrib,
            });
            Ok(())
        };
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, g.reduce_to(self.nodes[*a].value.shape()))?;
                acc(*b, g.reduce_to(self.nodes[*b].value.shape()))?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.reduce_to(self.nodes[*a].value.shape()))?;
                if needs(*b) {
                    acc(*b, g.neg().reduce_to(self.nodes[*b].value.shape()))?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if needs(*a) {
                    acc(*a, g.mul(vb)?.reduce_to(va.shape()))?;
                }
                if needs(*b) {
                    acc(*b, g.mul(va)?.reduce_to(vb.shape()))?;
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if needs(*a) {
                    acc(*a, g.div(vb)?.reduce_to(va.shape()))?;
                }
                if needs(*b) {
                    // d(a/b)/db = -a / b^2 = -out / b
                    let contrib = g.mul(&node.value)?.div(vb)?.neg();
                    acc(*b, contrib.reduce_to(vb.shape()))?;
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if needs(*a) {
                    acc(*a, g.matmul_nt(vb)?)?;
                }
                if needs(*b) {
                    acc(*b, va.matmul_tn(g)?)?;
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone())?;
                if needs(*bias) {
                    acc(*bias, g.sum_rows()?)?;
                }
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape();
                acc(*a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::Mean(a) => {
                let v = &self.nodes[*a].value;
                acc(*a, Tensor::full(v.shape(), g.data()[0] / v.len() as f64))?;
            }
            Op::SumLast(a) => {
                let shape = self.nodes[*a].value.shape();
                acc(*a, g.expand_to(shape))?;
            }
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.nodes[p].value.shape()[*axis])
                    .collect();
                for (&p, piece) in parts.iter().zip(g.split(*axis, &sizes)) {
                    acc(p, piece)?;
                }
            }
            Op::Silu(a) => {
                let d = self.nodes[*a].value.map(silu_grad);
                acc(*a, g.mul(&d)?)?;
            }
            Op::Sin(a) => {
                let d = self.nodes[*a].value.map(f64::cos);
                acc(*a, g.mul(&d)?)?;
            }
            Op::Cos(a) => {
                let d = self.nodes[*a].value.map(|x| -x.sin());
                acc(*a, g.mul(&d)?)?;
            }
            Op::Sqrt(a) => {
                let d = node.value.map(|y| 0.5 / y);
                acc(*a, g.mul(&d)?)?;
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Ops for Graph {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }
    fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone())
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Add(a.0, b.0)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).sub(self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Sub(a.0, b.0)))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).mul(self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Mul(a.0, b.0)))
    }
    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).div(self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::Div(a.0, b.0)))
    }
    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = self.val(*a).scale(k);
        self.unary(*a, v, Op::Scale(a.0, k))
    }
    fn add_scalar(&mut self, a: &Var, k: f64) -> Var {
        let v = self.val(*a).add_scalar(k);
        self.unary(*a, v, Op::AddScalar(a.0))
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).matmul(self.val(*b))?;
        Ok(self.binary(*a, *b, v, Op::MatMul(a.0, b.0)))
    }
    fn add_row(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let v = self.val(*x).add_row(self.val(*bias))?;
        Ok(self.binary(*x, *bias, v, Op::AddRow(x.0, bias.0)))
    }
    fn sum(&mut self, a: &Var) -> Var {
        let v = self.val(*a).sum();
        self.unary(*a, v, Op::Sum(a.0))
    }
    fn mean(&mut self, a: &Var) -> Var {
        let v = self.val(*a).mean();
        self.unary(*a, v, Op::Mean(a.0))
    }
    fn sum_last(&mut self, a: &Var) -> Var {
        let v = self.val(*a).sum_last();
        self.unary(*a, v, Op::SumLast(a.0))
    }
    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.val(*p).clone()).collect();
        let v = Tensor::concat(&values, axis)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect(), axis), rg))
    }
    fn silu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(super::silu);
        self.unary(*a, v, Op::Silu(a.0))
    }
    fn sin(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::sin);
        self.unary(*a, v, Op::Sin(a.0))
    }
    fn cos(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::cos);
        self.unary(*a, v, Op::Cos(a.0))
    }
    fn sqrt(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::sqrt);
        self.unary(*a, v, Op::Sqrt(a.0))
    }
    fn stop_gradient(&mut self, a: &Var) -> Var {
        let v = self.val(*a).clone();
        self.push(v, Op::StopGradient, false)
    }
    fn round(&mut self, _a: &Var) -> Result<Var> {
        non_differentiable("round")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5));
        let loss = g.sum(&x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_squared_norm_is_twice_x() {
        let mut g = Graph::new();
        let xv = Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5);
        let x = g.leaf(xv.clone());
        let sq = g.square(&x).unwrap();
        let loss = g.sum(&sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), xv.scale(2.0));
    }

    #[test]
    fn stop_gradient_freezes_factor() {
        // d/dx sum(sg(x) * x) = sg(x) = x
        let mut g = Graph::new();
        let xv = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        let x = g.leaf(xv.clone());
        let frozen = g.stop_gradient(&x);
        assert_eq!(g.value(&frozen), &xv);
        let prod = g.mul(&frozen, &x).unwrap();
        let loss = g.sum(&prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), xv);
    }

    #[test]
    fn detached_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let s = g.sum(&x);
        let detached = g.stop_gradient(&s);
        let grads = g.backward(detached).unwrap();
        assert_eq!(grads.wrt(x), Tensor::zeros(&[2]));
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn broadcast_gradient_is_reduced() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let c = g.leaf(Tensor::column(&[2.0, -1.0]));
        let p = g.mul(&a, &c).unwrap();
        let loss = g.sum(&p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(c).data(), &[3.0, 12.0]);
        assert_eq!(grads.wrt(a).data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    }
}
