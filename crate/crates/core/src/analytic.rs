//! Closed-form Gaussian-to-Gaussian flow.
//!
//! `π0 = N(0, I)`, `π1 = N(mu, σ² I)` with independent coupling. The marginal of
//! `x_t = (1-t) x0 + t x1` is `N(t mu, ((1-t)² + t²σ²) I)` and the marginal
//! velocity `E[x1 - x0 | x_t = x]` is affine in `x`:
//!
//! ```text
//! v*(x, t) = mu + (tσ² - (1-t)) / ((1-t)² + t²σ²) * (x - t mu)
//! ```
//!
//! Flow maps and average velocities come from fourth-order Runge-Kutta on `v*`.
//! Everything here is written against [`Ops`], so the oracles also run under
//! forward-mode differentiation.

use std::fmt::Write as _;

use crate::nets::{Field, FieldInput};
use crate::tensor::{Eval, Ops, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticFlow {
    mu: Vec<f64>,
    sigma: f64,
}

impl AnalyticFlow {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Invalid("analytic flow needs dim >= 1".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    /// Isotropic target with the same mean on every axis.
    pub fn isotropic(dim: usize, mean: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![mean; dim], sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Per-axis standard deviation of `x_t`.
    pub fn marginal_std(&self, t: f64) -> f64 {
        ((1.0 - t).powi(2) + (t * self.sigma).powi(2)).sqrt()
    }

    /// Slope of `v*` in `x` at time `t`.
    pub fn velocity_coef(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (t * s2 - (1.0 - t)) / self.marginal_std(t).powi(2)
    }

    /// Per-axis variance of `x1 - x0` given `x_t`, the irreducible part of the
    /// rectified-flow loss at time `t`.
    pub fn conditional_variance(&self, t: f64) -> f64 {
        (self.sigma / self.marginal_std(t)).powi(2)
    }

    /// `n` samples from `π1` as an `[n, dim]` tensor.
    pub fn sample_target<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let eps = Tensor::randn(&[n, d], rng);
        Tensor::from_fn(&[n, d], |i| self.mu[i % d] + self.sigma * eps.data()[i])
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.row_len() != self.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "analytic",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.dim()],
            }
            .into());
        }
        Ok(())
    }

    /// `v*(x, t)` for a batch `x: [B, dim]` and per-row times `t: [B, 1]`.
    pub fn velocity<B: Ops>(&self, b: &mut B, x: &B::V, t: &B::V) -> Result<B::V> {
        let s2 = self.sigma * self.sigma;
        let num = b.scale(t, 1.0 + s2);
        let num = b.add_scalar(&num, -1.0);
        let omt = b.scale(t, -1.0);
        let omt = b.add_scalar(&omt, 1.0);
        let a = b.square(&omt)?;
        let tt = b.square(t)?;
        let c = b.scale(&tt, s2);
        let den = b.add(&a, &c)?;
        let coef = b.div(&num, &den)?;
        let mu_row = b.constant(Tensor::new(&[1, self.dim()], self.mu.clone())?);
        let mu = b.constant(Tensor::new(&[self.dim()], self.mu.clone())?);
        let tmu = b.matmul(t, &mu_row)?;
        let centred = b.sub(x, &tmu)?;
        let scaled = b.mul(&centred, &coef)?;
        Ok(b.add_row(&scaled, &mu)?)
    }

    /// Mean RK4 increment over `steps` equal steps from `t` to `s`, i.e.
    /// `(x_s - x_t) / (s - t)` without the division. Works for `s == t` (where it
    /// equals `v*`) and for `s < t` (backward integration).
    pub fn mean_increment<B: Ops>(&self, b: &mut B, x: &B::V, t: &B::V, s: &B::V, steps: usize) -> Result<B::V> {
        if steps == 0 {
            return Err(Error::Invalid("integrator needs steps >= 1".into()));
        }
        let span = b.sub(s, t)?;
        let h = b.scale(&span, 1.0 / steps as f64);
        let half = b.scale(&h, 0.5);
        let mut xk = x.clone();
        let mut tk = t.clone();
        let mut total: Option<B::V> = None;
        for _ in 0..steps {
            let tm = b.add(&tk, &half)?;
            let tn = b.add(&tk, &h)?;
            let k1 = self.velocity(b, &xk, &tk)?;
            let d = b.mul(&k1, &half)?;
            let x2 = b.add(&xk, &d)?;
            let k2 = self.velocity(b, &x2, &tm)?;
            let d = b.mul(&k2, &half)?;
            let x3 = b.add(&xk, &d)?;
            let k3 = self.velocity(b, &x3, &tm)?;
            let d = b.mul(&k3, &h)?;
            let x4 = b.add(&xk, &d)?;
            let k4 = self.velocity(b, &x4, &tn)?;
            let k23 = b.add(&k2, &k3)?;
            let k23 = b.scale(&k23, 2.0);
            let k14 = b.add(&k1, &k4)?;
            let k = b.add(&k14, &k23)?;
            let k = b.scale(&k, 1.0 / 6.0);
            let d = b.mul(&k, &h)?;
            xk = b.add(&xk, &d)?;
            tk = tn;
            total = Some(match total {
                None => k,
                Some(acc) => b.add(&acc, &k)?,
            });
        }
        let total = total.expect("steps >= 1");
        Ok(b.scale(&total, 1.0 / steps as f64))
    }

    /// `v*(x, t)` at a shared time.
    pub fn exact_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x)?;
        self.velocity(&mut Eval, x, &Tensor::full(&[x.rows(), 1], t))
    }

    /// Integrate `v*` from `t` to `s` in either direction.
    pub(crate) fn integrate(&self, x: &Tensor, t: f64, s: f64, steps: usize) -> Result<Tensor> {
        self.check(x)?;
        if s == t {
            return Ok(x.clone());
        }
        let n = x.rows();
        let u = self.mean_increment(&mut Eval, x, &Tensor::full(&[n, 1], t), &Tensor::full(&[n, 1], s), steps)?;
        Ok(x.add(&u.scale(s - t))?)
    }

    /// RK4 flow map from `t` forward to `s`.
    pub fn flow_map(&self, x: &Tensor, t: f64, s: f64, steps: usize) -> Result<Tensor> {
        if s < t {
            return Err(Error::TimeOrder { t, s });
        }
        self.integrate(x, t, s, steps)
    }

    /// Forward Euler with `steps` equal steps, for convergence comparisons.
    pub fn euler_map(&self, x: &Tensor, t: f64, s: f64, steps: usize) -> Result<Tensor> {
        self.check(x)?;
        if s < t {
            return Err(Error::TimeOrder { t, s });
        }
        let h = (s - t) / steps.max(1) as f64;
        let mut xk = x.clone();
        for k in 0..steps {
            let v = self.exact_velocity(&xk, t + k as f64 * h)?;
            xk = xk.add(&v.scale(h))?;
        }
        Ok(xk)
    }

    /// `u*(x, t, s) = (flow_map(x, t, s) - x) / (s - t)`; `v*` when `s == t`.
    pub fn exact_avg_velocity(&self, x: &Tensor, t: f64, s: f64, steps: usize) -> Result<Tensor> {
        self.check(x)?;
        if s < t {
            return Err(Error::TimeOrder { t, s });
        }
        let n = x.rows();
        self.mean_increment(&mut Eval, x, &Tensor::full(&[n, 1], t), &Tensor::full(&[n, 1], s), steps)
    }

    /// `d/dt u*(x_t, t, s)` along the trajectory through `x` at `t`, by central
    /// differences with step `h`.
    pub fn avg_velocity_time_derivative(&self, x: &Tensor, t: f64, s: f64, steps: usize, h: f64) -> Result<Tensor> {
        let u_at = |tau: f64| -> Result<Tensor> {
            let xt = self.integrate(x, t, tau, 1)?;
            let n = x.rows();
            self.mean_increment(&mut Eval, &xt, &Tensor::full(&[n, 1], tau), &Tensor::full(&[n, 1], s), steps)
        };
        let plus = u_at(t + h)?;
        let minus = u_at(t - h)?;
        Ok(plus.sub(&minus)?.scale(0.5 / h))
    }
}

/// `v*` as a [`Field`]; conditioning inputs are ignored.
#[derive(Debug, Clone, Copy)]
pub struct ExactVelocity<'a>(pub &'a AnalyticFlow);

impl Field for ExactVelocity<'_> {
    fn forward<B: Ops>(&self, b: &mut B, _params: &[B::V], input: &FieldInput<'_, B::V>) -> Result<B::V> {
        self.0.velocity(b, input.z, input.t)
    }
}

/// `u*` as a [`Field`], integrated with `steps` RK4 steps.
#[derive(Debug, Clone, Copy)]
pub struct ExactAverageVelocity<'a> {
    pub flow: &'a AnalyticFlow,
    pub steps: usize,
}

impl Field for ExactAverageVelocity<'_> {
    fn forward<B: Ops>(&self, b: &mut B, _params: &[B::V], input: &FieldInput<'_, B::V>) -> Result<B::V> {
        let s = input.s.ok_or(Error::WrongKind("average velocity needs an end time"))?;
        self.flow.mean_increment(b, input.z, input.t, s, self.steps)
    }
}

/// Cell midpoints `(i + 0.5) / k` of a uniform partition of `[0, 1]`.
pub fn midpoint_grid(k: usize) -> Vec<f64> {
    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualCell {
    pub t: f64,
    pub s: f64,
    /// `None` for cells with `s <= t`, which are skipped.
    pub stats: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSettings {
    pub steps: usize,
    pub h: f64,
}

impl Default for ResidualSettings {
    fn default() -> Self {
        Self { steps: 1024, h: 1e-4 }
    }
}

/// Residual of `u* = v* + (s - t) du*/dt` per `(t, s)` cell, over probe points
/// `probes: [P, dim]`. Each cell reports the max and mean of the per-probe norm.
pub fn identity_residual_grid(
    flow: &AnalyticFlow,
    t_grid: &[f64],
    s_grid: &[f64],
    probes: &Tensor,
    settings: ResidualSettings,
) -> Result<Vec<ResidualCell>> {
    flow.check(probes)?;
    let cells: Vec<(f64, f64)> = t_grid.iter().flat_map(|&t| s_grid.iter().map(move |&s| (t, s))).collect();
    crate::par::map_indices(cells.len(), |i| {
        let (t, s) = cells[i];
        if s <= t {
            return Ok(ResidualCell { t, s, stats: None });
        }
        let u = flow.exact_avg_velocity(probes, t, s, settings.steps)?;
        let v = flow.exact_velocity(probes, t)?;
        let dudt = flow.avg_velocity_time_derivative(probes, t, s, settings.steps, settings.h)?;
        let r = u.sub(&v)?.sub(&dudt.scale(s - t))?;
        let norms: Vec<f64> = r.mul(&r)?.sum_last().data().iter().map(|x| x.sqrt()).collect();
        let max = norms.iter().copied().fold(0.0, f64::max);
        let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
        Ok(ResidualCell {
            t,
            s,
            stats: Some((max, mean)),
        })
    })
    .into_iter()
    .collect()
}

/// CSV with columns `t,s,max_resid,mean_resid`; skipped cells say `skipped`.
pub fn residual_csv(cells: &[ResidualCell]) -> String {
    let mut out = String::from("t,s,max_resid,mean_resid\n");
    for c in cells {
        match c.stats {
            Some((max, mean)) => writeln!(out, "{},{},{:e},{:e}", c.t, c.s, max, mean),
            None => writeln!(out, "{},{},skipped,skipped", c.t, c.s),
        }
        .expect("writing to a String");
    }
    out
}

/// Largest residual over all evaluated cells.
pub fn max_residual(cells: &[ResidualCell]) -> f64 {
    cells.iter().filter_map(|c| c.stats).map(|(m, _)| m).fold(0.0, f64::max)
}
