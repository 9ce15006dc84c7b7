use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. Fails before touching anything if a gradient is non-finite or
    /// shapes disagree.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Invalid(format!(
                    "adam: gradient shape {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    names.get(i).map_or("?", String::as_str),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let gd = g.data();
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut p = params[i].to_vec();
            for j in 0..gd.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gd[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * gd[j] * gd[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
            let shape = g.shape();
            self.m[i] = Tensor::new(shape, m)?;
            self.v[i] = Tensor::new(shape, v)?;
            params[i] = Tensor::new(shape, p)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients; rescales them to `max_norm` when above it.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut a = AdamState::new(&p, AdamConfig::default());
        a.step(&mut p, &[Tensor::zeros(&[3])], &names(1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::zeros(&[4])];
        let g = Tensor::new(&[4], vec![0.5, -2.0, 1e-2, 30.0]).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut a = AdamState::new(&p, cfg);
        a.step(&mut p, &[g.clone()], &names(1)).unwrap();
        for (dp, gv) in p[0].data().iter().zip(g.data()) {
            let expected = 0.01 * gv.abs() / (gv.abs() + 1e-8);
            assert!((dp.abs() - expected).abs() <= 1e-6 * expected);
            assert_eq!(dp.signum(), -gv.signum());
        }
    }

    #[test]
    fn quadratic_bowl() {
        let a_vec = Tensor::new(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let mut p = vec![Tensor::zeros(&[3])];
        let mut adam = AdamState::new(
            &p,
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
        );
        for _ in 0..500 {
            let g = p[0].sub(&a_vec).unwrap().scale(2.0);
            adam.step(&mut p, &[g], &names(1)).unwrap();
        }
        let err = p[0].sub(&a_vec).unwrap().sq_norm().sqrt();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::zeros(&[2]), Tensor::zeros(&[1])];
        let mut a = AdamState::new(&p, AdamConfig::default());
        let grads = [Tensor::zeros(&[2]), Tensor::new(&[1], vec![f64::NAN]).unwrap()];
        let err = a.step(&mut p, &grads, &names(2)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(a.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(&[2], vec![30.0, 40.0]).unwrap()];
        let (n, c) = clip_grad_norm(&mut g, 10.0);
        assert_eq!(n, 50.0);
        assert!(c);
        assert!((g[0].sq_norm().sqrt() - 10.0).abs() < 1e-12);
    }
}
