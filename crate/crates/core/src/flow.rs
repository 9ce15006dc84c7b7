//! Loss mathematics: interpolation, rectified-flow loss, timestep sampling,
//! classifier-free guidance, the distillation target and loss.
//!
//! Time runs from noise (`t = 0`) to data (`t = 1`), and the student's end time
//! always satisfies `s >= t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::{Bound, Field, FieldInput, LabelSpace};
use crate::tensor::{jvp, Eval, Ops, Tensor};
use crate::{Error, Result};

/// `(1 - t) z0 + t z1`.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    Ok(z0.scale(1.0 - t).add(&z1.scale(t))?)
}

/// Row-wise interpolation with per-row times `t: [B, 1]`.
pub fn interpolate_rows(z0: &Tensor, z1: &Tensor, t: &Tensor) -> Result<Tensor> {
    let omt = t.scale(-1.0).add_scalar(1.0);
    Ok(z0.mul(&omt)?.add(&z1.mul(t)?)?)
}

/// One training batch. `z0` is the noise endpoint and `z1` the data endpoint.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub z0: Tensor,
    pub z1: Tensor,
    pub lr: Tensor,
    pub labels: Vec<usize>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn t_col(&self) -> Tensor {
        Tensor::column(&self.t)
    }

    pub fn s_col(&self) -> Tensor {
        Tensor::column(&self.s)
    }

    pub fn z_t(&self) -> Result<Tensor> {
        interpolate_rows(&self.z0, &self.z1, &self.t_col())
    }

    pub fn check(&self) -> Result<()> {
        let n = self.labels.len();
        let ok = self.z0.shape() == self.z1.shape()
            && self.z0.rows() == n
            && self.lr.rows() == n
            && self.t.len() == n
            && (self.s.is_empty() || self.s.len() == n);
        if !ok {
            return Err(Error::Invalid(format!(
                "inconsistent batch: z0 {:?}, z1 {:?}, lr {:?}, {} labels, {} t, {} s",
                self.z0.shape(),
                self.z1.shape(),
                self.lr.shape(),
                n,
                self.t.len(),
                self.s.len()
            )));
        }
        if let Some((t, s)) = self.t.iter().zip(&self.s).find(|(t, s)| s < t) {
            return Err(Error::TimeOrder { t: *t, s: *s });
        }
        Ok(())
    }
}

/// Mean over the batch of `‖v(z_t, t) - (z1 - z0)‖²`.
pub fn rf_loss<B: Ops, F: Field>(b: &mut B, teacher: Bound<'_, F, B::V>, batch: &FlowBatch) -> Result<B::V> {
    batch.check()?;
    let z = b.constant(batch.z_t()?);
    let t = b.constant(batch.t_col());
    let lr = b.constant(batch.lr.clone());
    let v = teacher.call(
        b,
        &FieldInput {
            z: &z,
            t: &t,
            s: None,
            lr: &lr,
            labels: &batch.labels,
        },
    )?;
    let target = b.constant(batch.z1.sub(&batch.z0)?);
    let r = b.sub(&v, &target)?;
    let sq = b.square(&r)?;
    let total = b.sum(&sq);
    Ok(b.scale(&total, 1.0 / batch.len().max(1) as f64))
}

/// [`rf_loss`] evaluated without differentiation.
pub fn rf_loss_value<F: Field>(teacher: &F, batch: &FlowBatch) -> Result<f64> {
    let params = teacher.bind(&mut Eval);
    let v = rf_loss(&mut Eval, Bound::new(teacher, &params), batch)?;
    Ok(v.data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepPair {
    pub t: f64,
    pub s: f64,
}

/// `t ~ U[0, 1]`; with probability `ratio_r`, `s ~ U[t, 1]`, otherwise `s = t`.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, ratio_r: f64) -> TimestepPair {
    let t: f64 = rng.random();
    let s = if rng.random::<f64>() < ratio_r {
        t + (1.0 - t) * rng.random::<f64>()
    } else {
        t
    };
    TimestepPair { t, s }
}

/// `n` independent pairs as `(t, s)` vectors.
pub fn sample_timestep_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, ratio_r: f64) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|_| {
            let p = sample_timesteps(rng, ratio_r);
            (p.t, p.s)
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    /// `z1 - z0`.
    Gt,
    /// `w (z1 - z0) + κ u(z, t, t | c) + (1 - w - κ) u(z, t, t | ∅)` with the live student.
    OriginalMf,
    /// `v(c) + w (v(c) - v(∅))`.
    TeacherNull,
    /// `v(c) + w (v(c) - v(c_neg))`.
    TeacherNeg,
}

impl CfgMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gt => "gt",
            Self::OriginalMf => "original_mf",
            Self::TeacherNull => "teacher_null",
            Self::TeacherNeg => "teacher_neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgConfig {
    pub mode: CfgMode,
    pub w: f64,
    pub kappa: f64,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self {
            mode: CfgMode::TeacherNeg,
            w: 6.0,
            kappa: 0.0,
        }
    }
}

impl CfgConfig {
    pub fn new(mode: CfgMode, w: f64, kappa: f64) -> Result<Self> {
        let c = Self { mode, w, kappa };
        c.validate()?;
        Ok(c)
    }

    /// `w / (1 - κ)`.
    pub fn effective_scale(&self) -> f64 {
        self.w / (1.0 - self.kappa)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("cfg.w must be finite and >= 0, got {}", self.w)));
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("cfg.kappa must lie in [0, 1), got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Conditioning shared by every guidance evaluation.
pub struct GuidanceInput<'a, V> {
    pub z: &'a V,
    pub t: &'a V,
    pub lr: &'a V,
    pub labels: &'a [usize],
    /// `(z0, z1)`, needed by `gt` and `original_mf`.
    pub endpoints: Option<(&'a V, &'a V)>,
}

fn guidance_terms<'a, V>(
    inp: &GuidanceInput<'a, V>,
    mode: &'static str,
) -> Result<(&'a V, &'a V)> {
    inp.endpoints.ok_or(Error::MissingInput {
        mode,
        what: "the (z0, z1) endpoints",
    })
}

/// Guided instantaneous velocity on an arbitrary backend.
///
/// Terms whose coefficient is exactly zero are not evaluated, so the no-op
/// settings reproduce the unguided velocity bit for bit.
pub fn cfg_velocity_op<B: Ops, T: Field, S: Field>(
    b: &mut B,
    teacher: Bound<'_, T, B::V>,
    student: Option<Bound<'_, S, B::V>>,
    space: LabelSpace,
    cfg: &CfgConfig,
    inp: &GuidanceInput<'_, B::V>,
) -> Result<B::V> {
    cfg.validate()?;
    let n = inp.labels.len();
    let teacher_at = |b: &mut B, labels: &[usize]| {
        teacher.call(
            b,
            &FieldInput {
                z: inp.z,
                t: inp.t,
                s: None,
                lr: inp.lr,
                labels,
            },
        )
    };
    match cfg.mode {
        CfgMode::Gt => {
            let (z0, z1) = guidance_terms(inp, "gt")?;
            Ok(b.sub(z1, z0)?)
        }
        CfgMode::TeacherNull | CfgMode::TeacherNeg => {
            let vc = teacher_at(b, inp.labels)?;
            if cfg.w == 0.0 {
                return Ok(vc);
            }
            let other = if cfg.mode == CfgMode::TeacherNull {
                space.null()
            } else {
                space.negative()
            };
            let vo = teacher_at(b, &vec![other.id; n])?;
            let dir = b.sub(&vc, &vo)?;
            let dir = b.scale(&dir, cfg.w);
            Ok(b.add(&vc, &dir)?)
        }
        CfgMode::OriginalMf => {
            let (z0, z1) = guidance_terms(inp, "original_mf")?;
            let gt = b.sub(z1, z0)?;
            let mut out = b.scale(&gt, cfg.w);
            let k_null = 1.0 - cfg.w - cfg.kappa;
            if cfg.kappa == 0.0 && k_null == 0.0 {
                return Ok(out);
            }
            let student = student.ok_or(Error::MissingInput {
                mode: "original_mf",
                what: "the student",
            })?;
            let student_at = |b: &mut B, labels: &[usize]| {
                student.call(
                    b,
                    &FieldInput {
                        z: inp.z,
                        t: inp.t,
                        s: Some(inp.t),
                        lr: inp.lr,
                        labels,
                    },
                )
            };
            for (k, labels) in [(cfg.kappa, inp.labels.to_vec()), (k_null, vec![space.null().id; n])] {
                if k != 0.0 {
                    let u = student_at(b, &labels)?;
                    let u = b.scale(&u, k);
                    out = b.add(&out, &u)?;
                }
            }
            Ok(out)
        }
    }
}

/// [`cfg_velocity_op`] on plain tensors, with each field's own parameters.
pub fn cfg_velocity<T: Field, S: Field>(
    teacher: &T,
    student: Option<&S>,
    space: LabelSpace,
    cfg: &CfgConfig,
    inp: &GuidanceInput<'_, Tensor>,
) -> Result<Tensor> {
    let tp = teacher.bind(&mut Eval);
    let sp = student.map(|s| s.bind(&mut Eval)).unwrap_or_default();
    cfg_velocity_op(
        &mut Eval,
        Bound::new(teacher, &tp),
        student.map(|s| Bound::new(s, &sp)),
        space,
        cfg,
        inp,
    )
}

/// `v_inst + (s - t) du/dt`, where `du/dt` is the directional derivative of the
/// student along `(v_inst, 1, 0)` in `(z, t, s)`. The result is a plain tensor,
/// so it never carries gradient.
pub fn mfd_target<S: Field>(
    student: &S,
    v_inst: &Tensor,
    z: &Tensor,
    t: &Tensor,
    s: &Tensor,
    lr: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let n = z.rows();
    let (_, dudt) = jvp(
        &[z.clone(), t.clone(), s.clone()],
        &[v_inst.clone(), Tensor::ones(&[n, 1]), Tensor::zeros(&[n, 1])],
        |fw, xs| {
            let params = student.bind(fw);
            let lr = fw.constant(lr.clone());
            student.forward(
                fw,
                &params,
                &FieldInput {
                    z: &xs[0],
                    t: &xs[1],
                    s: Some(&xs[2]),
                    lr: &lr,
                    labels,
                },
            )
        },
    )?;
    let gap = s.sub(t)?;
    let mut out = v_inst.add(&dudt.mul(&gap)?)?.to_vec();
    let d = v_inst.row_len();
    for (i, g) in gap.data().iter().enumerate() {
        if *g == 0.0 {
            out[i * d..(i + 1) * d].copy_from_slice(v_inst.row(i));
        }
    }
    Ok(Tensor::new(v_inst.shape(), out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SquaredL2,
    PseudoHuber,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub metric: Metric,
    /// Pseudo-Huber constant; `0.03 * sqrt(dim)` when absent.
    pub huber_c: Option<f64>,
    /// Fraction of timestep pairs with `s > t`.
    pub ratio_r: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            metric: Metric::PseudoHuber,
            huber_c: None,
            ratio_r: 0.5,
        }
    }
}

impl LossConfig {
    pub fn huber_c_for(&self, dim: usize) -> f64 {
        self.huber_c.unwrap_or(0.03 * (dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.huber_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("loss.huber_c must be positive, got {c}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ratio_r) {
            return Err(Error::Config(format!("loss.ratio_r must lie in [0, 1], got {}", self.ratio_r)));
        }
        Ok(())
    }
}

/// `sqrt(‖a - b‖² + c²) - c` over whole tensors.
pub fn pseudo_huber(a: &Tensor, b: &Tensor, huber_c: f64) -> Result<f64> {
    let r2 = a.sub(b)?.sq_norm();
    Ok(huber_from_sq(r2, huber_c))
}

/// `sqrt(r² + c²) - c` written as `r² / (sqrt(r² + c²) + c)`, which keeps full
/// precision when `r ≪ c`.
fn huber_from_sq(r2: f64, c: f64) -> f64 {
    r2 / ((r2 + c * c).sqrt() + c)
}

/// Per-sample distance between `u` and a constant `target`, averaged over the batch.
pub fn regression_loss<B: Ops>(b: &mut B, u: &B::V, target: &Tensor, loss: &LossConfig) -> Result<B::V> {
    let n = target.rows().max(1);
    let tgt = b.constant(target.clone());
    let r = b.sub(u, &tgt)?;
    let sq = b.square(&r)?;
    let per = b.sum_last(&sq);
    let per = match loss.metric {
        Metric::SquaredL2 => per,
        Metric::PseudoHuber => {
            let c = loss.huber_c_for(target.row_len());
            let inner = b.add_scalar(&per, c * c);
            let root = b.sqrt(&inner);
            let den = b.add_scalar(&root, c);
            b.div(&per, &den)?
        }
    };
    let total = b.sum(&per);
    Ok(b.scale(&total, 1.0 / n as f64))
}

/// Student prediction `u(z_t, t, s)` for a batch.
fn student_prediction<B: Ops, S: Field>(b: &mut B, student: Bound<'_, S, B::V>, batch: &FlowBatch, z: &B::V) -> Result<B::V> {
    let t = b.constant(batch.t_col());
    let s = b.constant(batch.s_col());
    let lr = b.constant(batch.lr.clone());
    student.call(
        b,
        &FieldInput {
            z,
            t: &t,
            s: Some(&s),
            lr: &lr,
            labels: &batch.labels,
        },
    )
}

/// Distillation loss against a precomputed target.
pub fn mfd_loss_with_target<B: Ops, S: Field>(
    b: &mut B,
    student: Bound<'_, S, B::V>,
    batch: &FlowBatch,
    target: &Tensor,
    loss: &LossConfig,
) -> Result<B::V> {
    let z = b.constant(batch.z_t()?);
    let u = student_prediction(b, student, batch, &z)?;
    regression_loss(b, &u, target, loss)
}

/// Guided instantaneous velocity and distillation target for a batch, both
/// detached from any graph.
pub fn mfd_batch_target<S: Field, T: Field>(
    student: &S,
    teacher: &T,
    space: LabelSpace,
    batch: &FlowBatch,
    cfg: &CfgConfig,
) -> Result<Tensor> {
    batch.check()?;
    let z = batch.z_t()?;
    let t = batch.t_col();
    let v_inst = cfg_velocity(
        teacher,
        Some(student),
        space,
        cfg,
        &GuidanceInput {
            z: &z,
            t: &t,
            lr: &batch.lr,
            labels: &batch.labels,
            endpoints: Some((&batch.z0, &batch.z1)),
        },
    )?;
    mfd_target(student, &v_inst, &z, &t, &batch.s_col(), &batch.lr, &batch.labels)
}

/// Distillation loss. `z_t` interpolates noise and data at `t`, the guided
/// teacher velocity feeds the JVP target, and only the student's prediction
/// `u(z_t, t, s)` is differentiable.
///
/// The teacher and the target path are evaluated on `b` and then cut with
/// `stop_gradient`, so whatever the teacher's parameters are bound as, they
/// receive exactly zero gradient.
pub fn mfd_loss<B: Ops, S: Field, T: Field>(
    b: &mut B,
    student: Bound<'_, S, B::V>,
    teacher: Bound<'_, T, B::V>,
    space: LabelSpace,
    batch: &FlowBatch,
    cfg: &CfgConfig,
    loss: &LossConfig,
) -> Result<B::V> {
    batch.check()?;
    loss.validate()?;
    let z = b.constant(batch.z_t()?);
    let t = b.constant(batch.t_col());
    let lr = b.constant(batch.lr.clone());
    let z0 = b.constant(batch.z0.clone());
    let z1 = b.constant(batch.z1.clone());
    let v_inst = cfg_velocity_op(
        b,
        teacher,
        Some(student),
        space,
        cfg,
        &GuidanceInput {
            z: &z,
            t: &t,
            lr: &lr,
            labels: &batch.labels,
            endpoints: Some((&z0, &z1)),
        },
    )?;
    let v_inst = b.stop_gradient(&v_inst);
    let v_inst = b.value(&v_inst).clone();
    let target = mfd_target(
        student.field,
        &v_inst,
        b.value(&z),
        &batch.t_col(),
        &batch.s_col(),
        &batch.lr,
        &batch.labels,
    )?;
    let u = student_prediction(b, student, batch, &z)?;
    regression_loss(b, &u, &target, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{AnalyticFlow, ExactAverageVelocity, ExactVelocity};
    use crate::nets::{FieldNet, NetConfig, NetShape};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `v = a * z + bias`, with the bias depending on the label.
    struct Affine {
        a: f64,
        per_label: Vec<f64>,
    }

    impl Field for Affine {
        fn forward<B: Ops>(&self, b: &mut B, _p: &[B::V], inp: &FieldInput<'_, B::V>) -> Result<B::V> {
            let az = b.scale(inp.z, self.a);
            let bias: Vec<f64> = inp.labels.iter().map(|&l| self.per_label[l]).collect();
            let bias = b.constant(Tensor::column(&bias));
            Ok(b.add(&az, &bias)?)
        }
    }

    fn space() -> LabelSpace {
        LabelSpace::new(2)
    }

    #[test]
    fn interpolation_endpoints() {
        let z0 = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let z1 = Tensor::new(&[1, 2], vec![2.0, 4.0]).unwrap();
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        assert_eq!(interpolate(&z0, &z1, 0.5).unwrap().to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn rf_loss_of_zero_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Tensor::randn(&[8, 3], &mut rng);
        let z1 = Tensor::randn(&[8, 3], &mut rng);
        let batch = FlowBatch {
            lr: Tensor::zeros(&[8, 1]),
            labels: vec![0; 8],
            t: vec![0.3; 8],
            s: vec![],
            z0: z0.clone(),
            z1: z1.clone(),
        };
        let zero = Affine {
            a: 0.0,
            per_label: vec![0.0; 4],
        };
        let loss = rf_loss_value(&zero, &batch).unwrap();
        let expected = z1.sub(&z0).unwrap().sq_norm() / 8.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn timestep_ratio_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p = sample_timesteps(&mut rng, 0.0);
            assert_eq!(p.t, p.s);
            let q = sample_timesteps(&mut rng, 1.0);
            assert!(q.s >= q.t && q.s <= 1.0);
        }
    }

    #[test]
    fn guidance_vanishes_at_zero_scale() {
        let teacher = Affine {
            a: 0.7,
            per_label: vec![0.1, -0.2, 0.5, 3.0],
        };
        let z = Tensor::column(&[0.3, -0.4]);
        let t = Tensor::column(&[0.2, 0.6]);
        let lr = Tensor::zeros(&[2, 1]);
        let inp = GuidanceInput {
            z: &z,
            t: &t,
            lr: &lr,
            labels: &[0, 1],
            endpoints: None,
        };
        let plain = cfg_velocity(&teacher, None::<&Affine>, space(), &CfgConfig::new(CfgMode::TeacherNeg, 0.0, 0.0).unwrap(), &inp).unwrap();
        let direct = teacher.forward(&mut Eval, &[], &FieldInput {
            z: &z,
            t: &t,
            s: None,
            lr: &lr,
            labels: &[0, 1],
        })
        .unwrap();
        assert_eq!(plain, direct);

        let guided = cfg_velocity(&teacher, None::<&Affine>, space(), &CfgConfig::new(CfgMode::TeacherNeg, 2.0, 0.0).unwrap(), &inp).unwrap();
        // v(c) + 2 (v(c) - v(neg)) with v(neg) bias 3.0
        let expected = direct.add(&direct.sub(&z.scale(0.7).add_scalar(3.0)).unwrap().scale(2.0)).unwrap();
        assert!(guided.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn gt_mode_needs_endpoints() {
        let teacher = Affine {
            a: 0.0,
            per_label: vec![0.0; 4],
        };
        let z = Tensor::column(&[0.0]);
        let inp = GuidanceInput {
            z: &z,
            t: &z,
            lr: &z,
            labels: &[0],
            endpoints: None,
        };
        let cfg = CfgConfig::new(CfgMode::Gt, 0.0, 0.0).unwrap();
        assert!(matches!(
            cfg_velocity(&teacher, None::<&Affine>, space(), &cfg, &inp),
            Err(Error::MissingInput { mode: "gt", .. })
        ));
        let cfg = CfgConfig::new(CfgMode::OriginalMf, 1.0, 0.83).unwrap();
        assert!((cfg.effective_scale() - 1.0 / 0.17).abs() < 1e-12);
        let inp = GuidanceInput {
            endpoints: Some((&z, &z)),
            ..inp
        };
        assert!(matches!(
            cfg_velocity(&teacher, None::<&Affine>, space(), &cfg, &inp),
            Err(Error::MissingInput { what: "the student", .. })
        ));
    }

    #[test]
    fn bad_cfg_values() {
        assert!(CfgConfig::new(CfgMode::OriginalMf, 1.0, 1.0).is_err());
        assert!(CfgConfig::new(CfgMode::TeacherNull, -1.0, 0.0).is_err());
        assert!(CfgConfig::new(CfgMode::TeacherNull, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn target_equals_v_inst_when_times_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = NetShape {
            z_dim: 2,
            lr_dim: 1,
            labels: space(),
        };
        let cfg = NetConfig {
            hidden: 8,
            depth: 1,
            time_features: 4,
            time_embed: 4,
            cond_embed: 2,
            ..NetConfig::default()
        };
        let teacher = FieldNet::teacher(shape, cfg, &mut rng).unwrap();
        let student = FieldNet::init_student_from_teacher(&teacher).unwrap();
        let z = Tensor::randn(&[3, 2], &mut rng);
        let v = Tensor::randn(&[3, 2], &mut rng);
        let t = Tensor::column(&[0.1, 0.5, 0.9]);
        let lr = Tensor::zeros(&[3, 1]);
        let tgt = mfd_target(&student, &v, &z, &t, &t, &lr, &[0, 1, 0]).unwrap();
        assert_eq!(tgt, v);
    }

    #[test]
    fn target_of_constant_student_is_v_inst() {
        let constant = Affine {
            a: 0.0,
            per_label: vec![1.0, 2.0, 3.0, 4.0],
        };
        let z = Tensor::column(&[0.1, 0.2]);
        let v = Tensor::column(&[5.0, -5.0]);
        let tgt = mfd_target(
            &constant,
            &v,
            &z,
            &Tensor::column(&[0.1, 0.2]),
            &Tensor::column(&[0.9, 0.4]),
            &Tensor::zeros(&[2, 1]),
            &[0, 3],
        )
        .unwrap();
        assert_eq!(tgt, v);
    }

    #[test]
    fn analytic_target_reproduces_average_velocity() {
        let flow = AnalyticFlow::new(vec![2.0, -1.0], 0.5).unwrap();
        let avg = ExactAverageVelocity { flow: &flow, steps: 256 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[6, 2], &mut rng);
        let t = Tensor::column(&[0.05, 0.2, 0.35, 0.5, 0.1, 0.7]);
        let s = Tensor::column(&[0.9, 0.95, 0.6, 0.8, 0.15, 1.0]);
        let lr = Tensor::zeros(&[6, 1]);
        let labels = [0; 6];
        let v = ExactVelocity(&flow)
            .forward(&mut Eval, &[], &FieldInput {
                z: &z,
                t: &t,
                s: None,
                lr: &lr,
                labels: &labels,
            })
            .unwrap();
        let tgt = mfd_target(&avg, &v, &z, &t, &s, &lr, &labels).unwrap();
        let u = avg
            .forward(&mut Eval, &[], &FieldInput {
                z: &z,
                t: &t,
                s: Some(&s),
                lr: &lr,
                labels: &labels,
            })
            .unwrap();
        assert!(tgt.max_abs_diff(&u) < 1e-3, "{}", tgt.max_abs_diff(&u));
    }

    #[test]
    fn huber_values() {
        let a = Tensor::new(&[2], vec![3.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(pseudo_huber(&a, &a, 1.0).unwrap(), 0.0);
        assert!((pseudo_huber(&a, &b, 4.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = NetShape {
            z_dim: 2,
            lr_dim: 1,
            labels: space(),
        };
        let cfg = NetConfig {
            hidden: 8,
            depth: 1,
            time_features: 4,
            time_embed: 4,
            cond_embed: 2,
            ..NetConfig::default()
        };
        let mut teacher = FieldNet::teacher(shape, cfg, &mut rng).unwrap();
        let d = teacher.config().depth;
        let wshape = teacher.params()[2 * d].shape().to_vec();
        teacher.params_mut()[2 * d] = Tensor::randn(&wshape, &mut rng);
        let student = FieldNet::init_student_from_teacher(&teacher).unwrap();
        let (t, s) = sample_timestep_batch(&mut rng, 4, 0.5);
        let batch = FlowBatch {
            z0: Tensor::randn(&[4, 2], &mut rng),
            z1: Tensor::randn(&[4, 2], &mut rng),
            lr: Tensor::randn(&[4, 1], &mut rng),
            labels: vec![0, 1, 1, 0],
            t,
            s,
        };
        let mut g = Graph::new();
        let sp = student.bind(&mut g);
        let tp = teacher.bind(&mut g);
        let cfg = CfgConfig::new(CfgMode::TeacherNeg, 3.0, 0.0).unwrap();
        let loss = mfd_loss(
            &mut g,
            Bound::new(&student, &sp),
            Bound::new(&teacher, &tp),
            space(),
            &batch,
            &cfg,
            &LossConfig::default(),
        )
        .unwrap();
        let grads = g.backward(loss).unwrap();
        for v in &tp {
            assert_eq!(grads.wrt(*v).sq_norm(), 0.0);
        }
        assert!(sp.iter().map(|v| grads.wrt(*v).sq_norm()).sum::<f64>() > 0.0);
    }
}
