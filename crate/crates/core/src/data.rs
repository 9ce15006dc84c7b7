//! Desk-scale datasets.
//!
//! Three tasks share one batch format: the isotropic Gaussian target of
//! [`crate::analytic`], 2-D point clouds, and a toy super-resolution task whose
//! HR images are procedural textures and whose LR inputs come from a small
//! blur / downsample / quantize / noise pipeline.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticFlow;
use crate::flow::{sample_timestep_batch, FlowBatch};
use crate::nets::{LabelRole, LabelSpace};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist2d {
    Checkerboard,
    TwoMoons,
    Ring,
}

impl FromStr for Dist2d {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(Self::Checkerboard),
            "two_moons" => Ok(Self::TwoMoons),
            "ring" => Ok(Self::Ring),
            other => Err(Error::UnknownDistribution(other.to_string())),
        }
    }
}

/// Radial jitter of the ring, clipped at three standard deviations.
pub const RING_NOISE: f64 = 0.05;
const MOON_NOISE: f64 = 0.05;
/// Side length of one checkerboard cell; the board spans `[-2, 2]²`.
pub const CHECKER_CELL: f64 = 1.0;

/// True when `(x, y)` lies in an occupied checkerboard cell.
pub fn checkerboard_occupied(x: f64, y: f64) -> bool {
    let i = (x / CHECKER_CELL).floor() as i64;
    let j = (y / CHECKER_CELL).floor() as i64;
    (i + j).rem_euclid(2) == 0
}

pub fn sample_2d<R: Rng + ?Sized>(dist: Dist2d, n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match dist {
            Dist2d::Checkerboard => loop {
                let x = rng.random_range(-2.0..2.0);
                let y = rng.random_range(-2.0..2.0);
                if checkerboard_occupied(x, y) {
                    break (x, y);
                }
            },
            Dist2d::TwoMoons => {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let (mut x, mut y) = if rng.random::<bool>() {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                x += MOON_NOISE * rng.sample::<f64, _>(StandardNormal);
                y += MOON_NOISE * rng.sample::<f64, _>(StandardNormal);
                (x - 0.5, y - 0.25)
            }
            Dist2d::Ring => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let jitter = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
                let r = 1.0 + RING_NOISE * jitter;
                (r * theta.cos(), r * theta.sin())
            }
        };
        data.push(x);
        data.push(y);
    }
    Tensor::new(&[n, 2], data).expect("n x 2")
}

/// `n` samples from the named distribution.
pub fn gen_2d<R: Rng + ?Sized>(name: &str, n: usize, rng: &mut R) -> Result<Tensor> {
    let dist = name.parse::<Dist2d>()?;
    if n == 0 {
        return Err(Error::Invalid("gen_2d needs n >= 1".into()));
    }
    Ok(sample_2d(dist, n, rng))
}

/// Randomised parameters of one procedural texture.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// `0.5 + 0.5 cos(2π (x cos θ + y sin θ) / period + phase)`.
    Stripes { angle: f64, period: f64, phase: f64 },
    Checker { cell: usize, dx: usize, dy: usize, low: f64, high: f64 },
    /// Linear falloff from a centre plus a few bright or dark discs.
    RadialDots {
        cx: f64,
        cy: f64,
        dots: Vec<(f64, f64, f64, f64)>,
    },
}

impl Pattern {
    pub fn random<R: Rng + ?Sized>(class: usize, h: usize, w: usize, rng: &mut R) -> Self {
        match class {
            0 => Self::Stripes {
                angle: rng.random_range(0.0..std::f64::consts::PI),
                period: rng.random_range(8.0..12.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            },
            1 => {
                let cell = rng.random_range(4..=8);
                Self::Checker {
                    cell,
                    dx: rng.random_range(0..cell),
                    dy: rng.random_range(0..cell),
                    low: rng.random_range(0.0..0.3),
                    high: rng.random_range(0.7..1.0),
                }
            }
            _ => {
                let n = rng.random_range(3..=6);
                Self::RadialDots {
                    cx: rng.random_range(0.0..w as f64),
                    cy: rng.random_range(0.0..h as f64),
                    dots: (0..n)
                        .map(|_| {
                            (
                                rng.random_range(0.0..w as f64),
                                rng.random_range(0.0..h as f64),
                                rng.random_range(1.5..3.0),
                                if rng.random::<bool>() { 1.0 } else { 0.0 },
                            )
                        })
                        .collect(),
                }
            }
        }
    }

    pub fn render(&self, h: usize, w: usize) -> Tensor {
        let diag = ((h * h + w * w) as f64).sqrt();
        let img = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            match self {
                Self::Stripes { angle, period, phase } => {
                    let proj = x * angle.cos() + y * angle.sin();
                    0.5 + 0.5 * (std::f64::consts::TAU * proj / period + phase).cos()
                }
                Self::Checker { cell, dx, dy, low, high } => {
                    let (xi, yi) = ((i % w + dx) / cell, (i / w + dy) / cell);
                    if (xi + yi) % 2 == 0 {
                        *high
                    } else {
                        *low
                    }
                }
                Self::RadialDots { cx, cy, dots } => {
                    let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    let mut v = 1.0 - 0.8 * r / diag;
                    for &(px, py, rad, val) in dots {
                        if (x - px).powi(2) + (y - py).powi(2) <= rad * rad {
                            v = val;
                        }
                    }
                    v
                }
            }
        });
        img.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Procedural grayscale texture of the given content class, values in `[0, 1]`.
pub fn gen_pattern<R: Rng + ?Sized>(labels: LabelSpace, class: usize, h: usize, w: usize, rng: &mut R) -> Result<Tensor> {
    let label = labels.label(class)?;
    if label.role != LabelRole::Content {
        return Err(Error::LabelRole {
            id: class,
            role: label.role.name(),
            expected: "content",
        });
    }
    Ok(Pattern::random(class, h, w, rng).render(h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub scale: usize,
    pub noise_sigma: f64,
    /// Number of grey levels after quantization; 0 disables it.
    pub quant_levels: u32,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            scale: 4,
            noise_sigma: 0.01,
            quant_levels: 64,
        }
    }
}

impl DegradeParams {
    /// No-op pipeline.
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            scale: 1,
            noise_sigma: 0.0,
            quant_levels: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) || self.scale == 0 || self.quant_levels == 1 {
            return Err(Error::Config(format!(
                "degradation needs blur_sigma >= 0, noise_sigma >= 0, scale >= 1, quant_levels 0 or >= 2; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Half-sample symmetric index: `... c b a | a b c ... | c b a ...`.
fn reflect(i: isize, n: usize) -> usize {
    let n2 = 2 * n as isize;
    let m = i.rem_euclid(n2);
    if m < n as isize {
        m as usize
    } else {
        (n2 - 1 - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of an `[h, w]` image with reflect padding.
pub fn blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = img.dims2("blur")?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

/// Mean over non-overlapping `k x k` blocks.
pub fn block_mean(img: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w) = img.dims2("block_mean")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Scale {
            scale: k,
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / k, w / k);
    let src = img.data();
    let inv = 1.0 / (k * k) as f64;
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        let (by, bx) = (i / ow * k, i % ow * k);
        let mut acc = 0.0;
        for y in by..by + k {
            acc += src[y * w + bx..y * w + bx + k].iter().sum::<f64>();
        }
        acc * inv
    }))
}

/// Nearest-neighbour upsample, each pixel repeated in a `k x k` block.
pub fn upsample_nearest(img: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w) = img.dims2("upsample")?;
    let src = img.data();
    Ok(Tensor::from_fn(&[h * k, w * k], |i| {
        let (y, x) = (i / (w * k), i % (w * k));
        src[(y / k) * w + x / k]
    }))
}

/// Blur, area-downsample, quantize, add noise, clamp to `[0, 1]`.
pub fn degrade<R: Rng + ?Sized>(hr: &Tensor, p: &DegradeParams, rng: &mut R) -> Result<Tensor> {
    p.validate()?;
    let (h, w) = hr.dims2("degrade")?;
    if h % p.scale != 0 || w % p.scale != 0 {
        return Err(Error::Scale {
            scale: p.scale,
            height: h,
            width: w,
        });
    }
    let mut img = block_mean(&blur(hr, p.blur_sigma)?, p.scale)?;
    if p.quant_levels >= 2 {
        let q = (p.quant_levels - 1) as f64;
        img = img.map(|v| (v * q).round() / q);
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        let noise = Tensor::from_fn(img.shape(), |_| normal.sample(rng));
        img = img.add(&noise)?;
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrPair {
    pub hr: Tensor,
    pub lr: Tensor,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    pub hr_size: usize,
    pub degrade: DegradeParams,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            hr_size: 32,
            degrade: DegradeParams::default(),
        }
    }
}

pub const SR_CLASSES: usize = 3;

impl SrConfig {
    pub fn lr_size(&self) -> usize {
        self.hr_size / self.degrade.scale
    }

    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        if self.hr_size == 0 || self.hr_size % self.degrade.scale != 0 {
            return Err(Error::Scale {
                scale: self.degrade.scale,
                height: self.hr_size,
                width: self.hr_size,
            });
        }
        Ok(())
    }

    /// One pair, a pure function of `(label, seed)` and the configuration.
    pub fn pair(&self, label: usize, seed: u64) -> Result<SrPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.hr_size;
        let hr = gen_pattern(LabelSpace::new(SR_CLASSES), label, n, n, &mut rng)?;
        let lr = degrade(&hr, &self.degrade, &mut rng)?;
        Ok(SrPair { hr, lr, label, seed })
    }
}

/// Pixel values in `[0, 1]` to model space `[-1, 1]` and back.
pub fn to_z(img: &Tensor) -> Tensor {
    img.scale(2.0).add_scalar(-1.0)
}

pub fn from_z(z: &Tensor) -> Tensor {
    z.add_scalar(1.0).scale(0.5).map(|v| v.clamp(0.0, 1.0))
}

/// Label dropout for teacher training: with `p_null` the label becomes the null
/// label; with `p_neg` (super-resolution only) it becomes the negative label and
/// the target moves `neg_mix` of the way from the HR image to its blurred copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub p_null: f64,
    pub p_neg: f64,
    pub neg_blur_sigma: f64,
    pub neg_mix: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            p_null: 0.5,
            p_neg: 0.1,
            neg_blur_sigma: 2.0,
            neg_mix: 0.05,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            p_null: 0.0,
            p_neg: 0.0,
            neg_blur_sigma: 0.0,
            neg_mix: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_null)
            && (0.0..=1.0).contains(&self.p_neg)
            && self.p_null + self.p_neg <= 1.0
            && self.neg_blur_sigma >= 0.0
            && (0.0..=1.0).contains(&self.neg_mix);
        if !ok {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Which data the flow transports noise to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Gaussian { mu: Vec<f64>, sigma: f64 },
    Gen2d { dist: Dist2d },
    Toysr(SrConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::Gaussian {
            mu: vec![1.0, -0.5],
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Gaussian(AnalyticFlow),
    Gen2d(Dist2d),
    ToySr(SrConfig),
}

/// Data half of a batch: targets, LR conditioning and labels.
#[derive(Debug, Clone)]
pub struct DataBatch {
    pub z1: Tensor,
    pub lr: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_config(task: &TaskConfig) -> Result<Self> {
        Ok(match task {
            TaskConfig::Gaussian { mu, sigma } => Self::Gaussian(AnalyticFlow::new(mu.clone(), *sigma)?),
            TaskConfig::Gen2d { dist } => Self::Gen2d(*dist),
            TaskConfig::Toysr(c) => {
                c.validate()?;
                Self::ToySr(*c)
            }
        })
    }

    pub fn z_dim(&self) -> usize {
        match self {
            Self::Gaussian(f) => f.dim(),
            Self::Gen2d(_) => 2,
            Self::ToySr(c) => c.hr_size * c.hr_size,
        }
    }

    pub fn lr_dim(&self) -> usize {
        match self {
            Self::ToySr(c) => c.lr_size() * c.lr_size(),
            _ => 1,
        }
    }

    pub fn labels(&self) -> LabelSpace {
        match self {
            Self::ToySr(_) => LabelSpace::new(SR_CLASSES),
            _ => LabelSpace::new(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian(_) => "gaussian",
            Self::Gen2d(_) => "gen2d",
            Self::ToySr(_) => "toysr",
        }
    }

    /// `n` super-resolution pairs with seeds `base ^ index` and random classes.
    pub fn sr_pairs(cfg: &SrConfig, n: usize, base: u64) -> Result<Vec<SrPair>> {
        crate::par::map_indices(n, |i| {
            let seed = base ^ i as u64;
            let label = (ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed)).random::<u32>() as usize) % SR_CLASSES;
            cfg.pair(label, seed)
        })
        .into_iter()
        .collect()
    }

    /// Data endpoints for `n` samples.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R, aug: &Augment) -> Result<DataBatch> {
        aug.validate()?;
        let space = self.labels();
        let (z1, lr, mut labels) = match self {
            Self::Gaussian(f) => (f.sample_target(n, rng), Tensor::zeros(&[n, 1]), vec![0; n]),
            Self::Gen2d(d) => (sample_2d(*d, n, rng), Tensor::zeros(&[n, 1]), vec![0; n]),
            Self::ToySr(c) => {
                let pairs = Self::sr_pairs(c, n, rng.random())?;
                let mut hr = Vec::with_capacity(n);
                let mut lrs = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for p in pairs {
                    hr.push(to_z(&p.hr).reshape(&[1, c.hr_size * c.hr_size])?);
                    lrs.push(to_z(&p.lr).reshape(&[1, c.lr_size() * c.lr_size()])?);
                    labels.push(p.label);
                }
                let mut hr_rows = hr;
                for (i, l) in labels.iter_mut().enumerate() {
                    let u: f64 = rng.random();
                    if u < aug.p_null {
                        *l = space.null().id;
                    } else if u < aug.p_null + aug.p_neg {
                        *l = space.negative().id;
                        let px = from_z(&hr_rows[i]).reshape(&[c.hr_size, c.hr_size])?;
                        let soft = blur(&px, aug.neg_blur_sigma)?;
                        let mixed = px.add(&soft.sub(&px)?.scale(aug.neg_mix))?;
                        hr_rows[i] = to_z(&mixed).reshape(&[1, c.hr_size * c.hr_size])?;
                    }
                }
                return Ok(DataBatch {
                    z1: Tensor::concat(&hr_rows, 0)?,
                    lr: Tensor::concat(&lrs, 0)?,
                    labels,
                });
            }
        };
        for l in labels.iter_mut() {
            if rng.random::<f64>() < aug.p_null {
                *l = space.null().id;
            }
        }
        Ok(DataBatch { z1, lr, labels })
    }

    /// Noise, data, conditioning and timestep pairs for one training step.
    pub fn make_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R, ratio_r: f64, aug: &Augment) -> Result<FlowBatch> {
        let data = self.sample_data(batch_size, rng, aug)?;
        let z0 = Tensor::randn(&[batch_size, self.z_dim()], rng);
        let (t, s) = sample_timestep_batch(rng, batch_size, ratio_r);
        Ok(FlowBatch {
            z0,
            z1: data.z1,
            lr: data.lr,
            labels: data.labels,
            t,
            s,
        })
    }
}

/// Binary PGM (P5, maxval 255) of an `[h, w]` image in `[0, 1]`.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = img.dims2("pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

/// CSV manifest with one row per pair: `seed,class,blur_sigma,scale,noise_sigma,quant_levels`.
pub fn manifest_csv(pairs: &[SrPair], p: &DegradeParams) -> String {
    let mut out = String::from("seed,class,blur_sigma,scale,noise_sigma,quant_levels\n");
    for pair in pairs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            pair.seed, pair.label, p.blur_sigma, p.scale, p.noise_sigma, p.quant_levels
        )
        .expect("writing to a String");
    }
    out
}

/// Point list with header `x,y` for 2-D points and `x0,x1,...` otherwise.
pub fn points_csv(points: &Tensor) -> String {
    let d = points.row_len();
    let mut out = if d == 2 {
        String::from("x,y\n")
    } else {
        let names: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        names.join(",") + "\n"
    };
    for i in 0..points.rows() {
        let r = points.row(i);
        let cols: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cols.join(",")).expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_distribution_lists_valid_names() {
        let err = gen_2d("spiral", 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checkerboard") && msg.contains("two_moons") && msg.contains("ring"));
    }

    #[test]
    fn ring_and_checkerboard_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ring = gen_2d("ring", 2000, &mut rng).unwrap();
        for i in 0..ring.rows() {
            let r = ring.row(i);
            let norm = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!((norm - 1.0).abs() <= 3.0 * RING_NOISE + 1e-12);
        }
        let cb = gen_2d("checkerboard", 2000, &mut rng).unwrap();
        for i in 0..cb.rows() {
            let r = cb.row(i);
            assert!(checkerboard_occupied(r[0], r[1]));
            assert!(r[0].abs() <= 2.0 && r[1].abs() <= 2.0);
        }
    }

    #[test]
    fn patterns_are_bounded_and_seeded() {
        let ls = LabelSpace::new(SR_CLASSES);
        for class in 0..3 {
            let a = gen_pattern(ls, class, 32, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = gen_pattern(ls, class, 32, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(gen_pattern(ls, 3, 8, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(gen_pattern(ls, 4, 8, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn identity_degradation() {
        let img = Pattern::random(2, 16, 16, &mut ChaCha8Rng::seed_from_u64(2)).render(16, 16);
        let out = degrade(&img, &DegradeParams::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full(&[16, 16], 0.37);
        let p = DegradeParams {
            blur_sigma: 1.7,
            scale: 4,
            noise_sigma: 0.0,
            quant_levels: 0,
        };
        let out = degrade(&img, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.shape(), &[4, 4]);
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn block_mean_of_ramp() {
        let img = Tensor::from_fn(&[8, 8], |i| i as f64 / 63.0);
        let p = DegradeParams {
            blur_sigma: 0.0,
            scale: 4,
            noise_sigma: 0.0,
            quant_levels: 0,
        };
        let out = degrade(&img, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut acc = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        acc += ((by * 4 + y) * 8 + bx * 4 + x) as f64 / 63.0;
                    }
                }
                assert!((out.data()[by * 2 + bx] - acc / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_scale() {
        let img = Tensor::zeros(&[10, 10]);
        let p = DegradeParams {
            scale: 4,
            ..DegradeParams::identity()
        };
        assert!(matches!(
            degrade(&img, &p, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Scale { scale: 4, .. })
        ));
    }

    #[test]
    fn pgm_header() {
        let bytes = encode_pgm(&Tensor::from_fn(&[2, 3], |i| i as f64 / 5.0)).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(*bytes.last().unwrap(), 255);
    }

    #[test]
    fn gen_batches_are_unconditional() {
        let ds = Dataset::Gen2d(Dist2d::TwoMoons);
        let b = ds.make_batch(16, &mut ChaCha8Rng::seed_from_u64(3), 0.5, &Augment::none()).unwrap();
        assert_eq!(b.lr, Tensor::zeros(&[16, 1]));
        assert!(b.labels.iter().all(|&l| l == 0));
        assert_eq!(b.z0.shape(), b.z1.shape());
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn sr_batch_shapes_and_augmentation() {
        let cfg = SrConfig {
            hr_size: 16,
            ..SrConfig::default()
        };
        let ds = Dataset::ToySr(cfg);
        let aug = Augment {
            p_null: 0.3,
            p_neg: 0.3,
            neg_blur_sigma: 2.0,
            neg_mix: 0.1,
        };
        let b = ds.make_batch(64, &mut ChaCha8Rng::seed_from_u64(4), 0.5, &aug).unwrap();
        assert_eq!(b.z1.shape(), &[64, 256]);
        assert_eq!(b.lr.shape(), &[64, 16]);
        let space = ds.labels();
        assert!(b.labels.contains(&space.null().id));
        assert!(b.labels.contains(&space.negative().id));
        assert!(b.z1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
