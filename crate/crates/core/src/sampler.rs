//! Samplers and desk-scale metrics.
//!
//! The student jumps along a time grid with its average velocity,
//! `z_{τ+1} = z_τ + (τ_{n+1} - τ_n) u(z_τ, τ_n, τ_{n+1})`; the teacher integrates
//! its (optionally guided) instantaneous velocity with Euler steps. Both run in
//! fixed row chunks in parallel, so results do not depend on the thread count.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytic::AnalyticFlow;
use crate::data::{from_z, upsample_nearest, Dataset, SR_CLASSES};
use crate::flow::{cfg_velocity, CfgConfig, CfgMode, GuidanceInput};
use crate::nets::{Field, FieldInput, LabelSpace};
use crate::tensor::{Eval, Tensor};
use crate::{Error, Result};

const SAMPLE_CHUNK: usize = 64;

/// `n + 1` evenly spaced points from 0 to 1.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { 1.0 } else { i as f64 / n as f64 }).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().expect("len >= 2") != 1.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!("time grid must rise strictly from 0 to 1, got {grid:?}")));
    }
    Ok(())
}

/// Apply `f` to fixed-size row chunks of `(z0, lr, labels)` in parallel.
fn chunked<F>(z0: &Tensor, lr: &Tensor, labels: &[usize], f: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &Tensor, &[usize]) -> Result<Tensor> + Send + Sync,
{
    let n = z0.rows();
    if lr.rows() != n || labels.len() != n {
        return Err(Error::Invalid(format!(
            "{} noise rows, {} LR rows, {} labels",
            n,
            lr.rows(),
            labels.len()
        )));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts = crate::par::map_indices(chunks, |c| {
        let (a, b) = (c * SAMPLE_CHUNK, ((c + 1) * SAMPLE_CHUNK).min(n));
        f(&z0.slice_rows(a, b), &lr.slice_rows(a, b), &labels[a..b])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(z0.clone());
    }
    Ok(Tensor::concat(&parts, 0)?)
}

/// A sampling run with its time grid and, optionally, every intermediate state.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub grid: Vec<f64>,
    pub states: Option<Vec<Tensor>>,
    pub samples: Tensor,
}

/// Student sampling on an explicit grid, keeping intermediate states when
/// `record` is set.
pub fn sample_student_run<S: Field + Sync>(
    student: &S,
    z0: &Tensor,
    lr: &Tensor,
    labels: &[usize],
    grid: &[f64],
    record: bool,
) -> Result<SampleRun> {
    check_grid(grid)?;
    let params = student.bind(&mut Eval);
    let step = |z: &Tensor, lr: &Tensor, labels: &[usize], a: f64, b: f64| -> Result<Tensor> {
        let n = z.rows();
        let t = Tensor::full(&[n, 1], a);
        let s = Tensor::full(&[n, 1], b);
        let u = student.forward(
            &mut Eval,
            &params,
            &FieldInput {
                z,
                t: &t,
                s: Some(&s),
                lr,
                labels,
            },
        )?;
        Ok(z.add(&u.scale(b - a))?)
    };
    if record {
        let mut states = vec![z0.clone()];
        let mut z = z0.clone();
        for w in grid.windows(2) {
            z = chunked(&z, lr, labels, |z, lr, l| step(z, lr, l, w[0], w[1]))?;
            states.push(z.clone());
        }
        return Ok(SampleRun {
            grid: grid.to_vec(),
            states: Some(states),
            samples: z,
        });
    }
    let samples = chunked(z0, lr, labels, |z, lr, l| {
        let mut z = z.clone();
        for w in grid.windows(2) {
            z = step(&z, lr, l, w[0], w[1])?;
        }
        Ok(z)
    })?;
    Ok(SampleRun {
        grid: grid.to_vec(),
        states: None,
        samples,
    })
}

/// `n_steps` student jumps on the uniform grid.
pub fn sample_student<S: Field + Sync>(student: &S, z0: &Tensor, lr: &Tensor, labels: &[usize], n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Invalid("sampling needs at least one step".into()));
    }
    Ok(sample_student_run(student, z0, lr, labels, &uniform_grid(n_steps), false)?.samples)
}

/// Euler integration of the teacher, `x += v / N`. With `guidance`, the velocity
/// is the guided combination of the `teacher_null` or `teacher_neg` mode.
pub fn sample_teacher_euler<T: Field + Sync>(
    teacher: &T,
    space: LabelSpace,
    z0: &Tensor,
    lr: &Tensor,
    labels: &[usize],
    n_steps: usize,
    guidance: Option<&CfgConfig>,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Invalid("sampling needs at least one step".into()));
    }
    if let Some(g) = guidance {
        if !matches!(g.mode, CfgMode::TeacherNull | CfgMode::TeacherNeg) {
            return Err(Error::Invalid(format!(
                "guidance mode {} needs data endpoints and cannot drive sampling",
                g.mode.name()
            )));
        }
    }
    let params = teacher.bind(&mut Eval);
    let grid = uniform_grid(n_steps);
    chunked(z0, lr, labels, |z, lr, labels| {
        let mut z = z.clone();
        for w in grid.windows(2) {
            let t = Tensor::full(&[z.rows(), 1], w[0]);
            let v = match guidance {
                None => teacher.forward(
                    &mut Eval,
                    &params,
                    &FieldInput {
                        z: &z,
                        t: &t,
                        s: None,
                        lr,
                        labels,
                    },
                )?,
                Some(g) => cfg_velocity(
                    teacher,
                    None::<&T>,
                    space,
                    g,
                    &GuidanceInput {
                        z: &z,
                        t: &t,
                        lr,
                        labels,
                        endpoints: None,
                    },
                )?,
            };
            z = z.add(&v.scale(w[1] - w[0]))?;
        }
        Ok(z)
    })
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; infinite when identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::TensorError::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let mse = a.sub(b)?.sq_norm() / a.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Metric value as CSV text; infinities are written as `inf`.
pub fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Sample mean and covariance of the rows of `x`, with the `n - 1` normaliser.
pub fn mean_cov(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2("moments")?;
    if n < 2 {
        return Err(Error::Invalid(format!("moments need at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    Ok((mean, cov))
}

/// `(‖mean - mu‖, ‖cov - σ² I‖_F)` of the samples against the analytic target.
pub fn moment_distance(samples: &Tensor, flow: &AnalyticFlow) -> Result<(f64, f64)> {
    let (mean, cov) = mean_cov(samples)?;
    let d = flow.dim();
    if mean.len() != d {
        return Err(Error::Invalid(format!("samples have dim {}, flow has {d}", mean.len())));
    }
    let mean_err = mean.iter().zip(flow.mu()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let s2 = flow.sigma().powi(2);
    let cov_err = (0..d * d)
        .map(|i| {
            let target = if i / d == i % d { s2 } else { 0.0 };
            (cov[i] - target).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    Ok((mean_err, cov_err))
}

fn mean_pair_dist(a: &Tensor, b: &Tensor, same: bool) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let rows = crate::par::map_indices(n, |i| {
        let ra = a.row(i);
        (0..m)
            .filter(|&j| !(same && i == j))
            .map(|j| ra.iter().zip(b.row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
    });
    let pairs = if same { n * (n - 1) } else { n * m };
    rows.iter().sum::<f64>() / pairs.max(1) as f64
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two point sets.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.row_len() != y.row_len() || x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Invalid(format!(
            "energy distance needs two [n >= 2, d] sets, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(2.0 * mean_pair_dist(x, y, false) - mean_pair_dist(x, x, true) - mean_pair_dist(y, y, true))
}

/// Mean squared response of the 5-point Laplacian (reflect-padded), a measure of
/// high-frequency content.
pub fn hf_power(img: &Tensor) -> Result<f64> {
    let (h, w) = img.dims2("hf_power")?;
    let d = img.data();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        d[yy * w + xx]
    };
    let mut acc = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            acc += lap * lap;
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Held-out evaluation inputs for one task.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub z0: Tensor,
    pub lr: Tensor,
    pub labels: Vec<usize>,
    /// Target samples (point tasks) or HR images in model space (super-resolution).
    pub reference: Tensor,
    pub seed: u64,
}

impl EvalSet {
    pub fn new(ds: &Dataset, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match ds {
            Dataset::ToySr(c) => {
                let pairs = Dataset::sr_pairs(c, n, seed)?;
                let rows = |f: &dyn Fn(&crate::data::SrPair) -> Tensor| -> Result<Tensor> {
                    let r = pairs
                        .iter()
                        .map(|p| {
                            let t = f(p);
                            let len = t.len();
                            t.reshape(&[1, len])
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    Ok(Tensor::concat(&r, 0)?)
                };
                let reference = rows(&|p| crate::data::to_z(&p.hr))?;
                let lr = rows(&|p| crate::data::to_z(&p.lr))?;
                let labels = pairs.iter().map(|p| p.label).collect();
                rng.set_stream(1);
                let z0 = Tensor::randn(&[n, ds.z_dim()], &mut rng);
                Ok(Self {
                    z0,
                    lr,
                    labels,
                    reference,
                    seed,
                })
            }
            _ => {
                let reference = ds.sample_data(n, &mut rng, &crate::data::Augment::none())?.z1;
                let z0 = Tensor::randn(&[n, ds.z_dim()], &mut rng);
                Ok(Self {
                    z0,
                    lr: Tensor::zeros(&[n, 1]),
                    labels: vec![0; n],
                    reference,
                    seed,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn sr_images(ds: &Dataset, z: &Tensor) -> Result<Vec<Tensor>> {
    let Dataset::ToySr(c) = ds else {
        return Err(Error::Invalid("image metrics need the super-resolution task".into()));
    };
    (0..z.rows())
        .map(|i| Ok(from_z(&Tensor::new(&[c.hr_size, c.hr_size], z.row(i).to_vec())?)))
        .collect()
}

/// Mean PSNR of model-space samples against the HR references.
pub fn mean_psnr(ds: &Dataset, samples: &Tensor, reference: &Tensor) -> Result<f64> {
    let a = sr_images(ds, samples)?;
    let b = sr_images(ds, reference)?;
    let vals = a.iter().zip(&b).map(|(x, y)| psnr(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Mean `|hf_power(HR) - hf_power(sample)|`: how far the detail level of the
/// samples is from the references.
pub fn hf_gap(ds: &Dataset, samples: &Tensor, reference: &Tensor) -> Result<f64> {
    let a = sr_images(ds, samples)?;
    let b = sr_images(ds, reference)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(&b) {
        acc += (hf_power(y)? - hf_power(x)?).abs();
    }
    Ok(acc / a.len().max(1) as f64)
}

/// Nearest-neighbour upsampling of the LR inputs, in model space.
pub fn upsample_baseline(ds: &Dataset, set: &EvalSet) -> Result<Tensor> {
    let Dataset::ToySr(c) = ds else {
        return Err(Error::Invalid("the upsampling baseline needs the super-resolution task".into()));
    };
    let k = c.degrade.scale;
    let ls = c.lr_size();
    let rows = (0..set.lr.rows())
        .map(|i| {
            let lr = Tensor::new(&[ls, ls], set.lr.row(i).to_vec())?;
            let up = upsample_nearest(&lr, k)?;
            Ok(up.reshape(&[1, c.hr_size * c.hr_size])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&rows, 0)?)
}

/// Task-appropriate metrics of `samples` against the evaluation set.
pub fn task_metrics(ds: &Dataset, set: &EvalSet, samples: &Tensor) -> Result<Vec<(&'static str, f64)>> {
    Ok(match ds {
        Dataset::Gaussian(flow) => {
            let (m, c) = moment_distance(samples, flow)?;
            vec![
                ("mean_err", m),
                ("cov_err", c),
                ("energy_distance", energy_distance(samples, &set.reference)?),
            ]
        }
        Dataset::Gen2d(_) => vec![("energy_distance", energy_distance(samples, &set.reference)?)],
        Dataset::ToySr(_) => vec![
            ("psnr", mean_psnr(ds, samples, &set.reference)?),
            ("hf_gap", hf_gap(ds, samples, &set.reference)?),
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "N,metric_name,value,n_samples,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.n, r.metric, format_value(r.value), r.n_samples, r.seed)
            .expect("writing to a String");
    }
    out
}

/// Sample the student at each step count and record every task metric.
pub fn steps_sweep<S: Field + Sync>(student: &S, ds: &Dataset, set: &EvalSet, n_list: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n in n_list {
        let samples = sample_student(student, &set.z0, &set.lr, &set.labels, n)?;
        for (name, value) in task_metrics(ds, set, &samples)? {
            rows.push(SweepRow {
                n,
                metric: name.to_string(),
                value,
                n_samples: set.len(),
                seed: set.seed,
            });
        }
    }
    Ok(rows)
}

/// Labels used when the caller asks for a class-specific sample set.
pub fn class_labels(ds: &Dataset, n: usize) -> Vec<usize> {
    match ds {
        Dataset::ToySr(_) => (0..n).map(|i| i % SR_CLASSES).collect(),
        _ => vec![0; n],
    }
}
