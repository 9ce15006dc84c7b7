//! Teacher and student velocity networks.
//!
//! Both are MLPs over `[z ‖ z_lr ‖ cond-embedding ‖ time-embedding]`. The teacher
//! predicts the instantaneous velocity `v(z, t | z_lr, c)`. The student predicts
//! the average velocity `u(z, t, s | z_lr, c)` and differs only by a second time
//! embedder for `s` whose output is added to the `t` embedding.
//!
//! With `skip` enabled the trunk output is joined by a time-gated linear path,
//! `alpha(emb) * z + beta(emb) * (z_lr @ L)`, whose gates start at zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Eval, Ops, Tensor};
use crate::{Error, Result};

/// Anything that maps `(z, t[, s], z_lr, labels)` to a velocity.
///
/// `bind` hands the field's trainable tensors to a backend once per step (as graph
/// leaves, dual constants or plain values); `forward` then runs on those bound
/// parameters. Oracles and test stubs have no parameters and keep the default.
pub trait Field {
    fn bind<B: Ops>(&self, _b: &mut B) -> Vec<B::V> {
        Vec::new()
    }

    fn forward<B: Ops>(&self, b: &mut B, params: &[B::V], input: &FieldInput<'_, B::V>) -> Result<B::V>;
}

/// Batched network inputs. `t` and `s` are `[batch, 1]` columns.
pub struct FieldInput<'a, V> {
    pub z: &'a V,
    pub t: &'a V,
    pub s: Option<&'a V>,
    pub lr: &'a V,
    pub labels: &'a [usize],
}

/// A field together with its parameters bound to one backend.
pub struct Bound<'a, F, V> {
    pub field: &'a F,
    pub params: &'a [V],
}

impl<'a, F, V> Clone for Bound<'a, F, V> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<'a, F, V> Copy for Bound<'a, F, V> {}

impl<'a, F: Field, V> Bound<'a, F, V> {
    pub fn new(field: &'a F, params: &'a [V]) -> Self {
        Self { field, params }
    }

    pub fn call<B: Ops<V = V>>(&self, b: &mut B, input: &FieldInput<'_, V>) -> Result<V> {
        self.field.forward(b, self.params, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRole {
    Content,
    Null,
    Negative,
}

impl LabelRole {
    pub fn name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Null => "null",
            Self::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionLabel {
    pub id: usize,
    pub role: LabelRole,
}

/// Content labels `0..n_content`, then one null and one negative label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub n_content: usize,
}

impl LabelSpace {
    pub fn new(n_content: usize) -> Self {
        Self { n_content }
    }

    pub fn len(&self) -> usize {
        self.n_content + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn null(&self) -> ConditionLabel {
        ConditionLabel {
            id: self.n_content,
            role: LabelRole::Null,
        }
    }

    pub fn negative(&self) -> ConditionLabel {
        ConditionLabel {
            id: self.n_content + 1,
            role: LabelRole::Negative,
        }
    }

    pub fn content(&self, id: usize) -> Result<ConditionLabel> {
        self.label(id).and_then(|l| match l.role {
            LabelRole::Content => Ok(l),
            other => Err(Error::LabelRole {
                id,
                role: other.name(),
                expected: "content",
            }),
        })
    }

    pub fn label(&self, id: usize) -> Result<ConditionLabel> {
        let role = match id {
            i if i < self.n_content => LabelRole::Content,
            i if i == self.n_content => LabelRole::Null,
            i if i == self.n_content + 1 => LabelRole::Negative,
            _ => {
                return Err(Error::UnknownLabel {
                    id,
                    n_labels: self.len(),
                })
            }
        };
        Ok(ConditionLabel { id, role })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Teacher,
    Student,
}

/// Data-dependent sizes, fixed by the task rather than by the user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub z_dim: usize,
    pub lr_dim: usize,
    pub labels: LabelSpace,
}

/// Architecture knobs, the `[net]` table of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Width of the hidden layers.
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Width of the raw sinusoidal time features (sin and cos halves).
    pub time_features: usize,
    /// Width of the projected time embedding.
    pub time_embed: usize,
    /// Width of the condition-label embedding.
    pub cond_embed: usize,
    /// `c_noise` coefficient of the teacher's time transform.
    pub teacher_c_noise: f64,
    /// Lowest and highest sinusoid frequency, in units of `c_noise * t`.
    pub freq_min: f64,
    pub freq_max: f64,
    /// Time-gated linear path from `z` and `z_lr` to the output.
    pub skip: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 3,
            time_features: 64,
            time_embed: 64,
            cond_embed: 16,
            teacher_c_noise: 1000.0,
            freq_min: 1e-3,
            freq_max: 3e-2,
            skip: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("net.{m}")));
        if self.hidden == 0 || self.time_embed == 0 {
            return bad("hidden and time_embed must be positive");
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return bad("time_features must be even and at least 2");
        }
        if !(self.freq_min > 0.0 && self.freq_max >= self.freq_min) {
            return bad("need 0 < freq_min <= freq_max");
        }
        if !(self.teacher_c_noise > 0.0 && self.teacher_c_noise.is_finite()) {
            return bad("teacher_c_noise must be positive");
        }
        Ok(())
    }
}

/// Sinusoidal features of `c_noise * t` followed by a two-layer projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedder {
    c_noise: f64,
    freqs: Vec<f64>,
    embed: usize,
    /// Index of the first projection tensor inside the owning net's parameter list.
    first: usize,
}

impl TimeEmbedder {
    /// Geometrically spaced frequencies between `freq_min` and `freq_max`.
    pub fn sinusoidal(features: usize, c_noise: f64, freq_min: f64, freq_max: f64) -> Self {
        let half = features / 2;
        let freqs = (0..half)
            .map(|i| {
                let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
                freq_min * (freq_max / freq_min).powf(frac)
            })
            .collect();
        Self {
            c_noise,
            freqs,
            embed: 0,
            first: 0,
        }
    }

    pub fn c_noise(&self) -> f64 {
        self.c_noise
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        self.embed
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.freqs.len()
    }

    /// `[sin(c t w_i) ‖ cos(c t w_i)]` for a `[batch, 1]` column of times.
    pub fn raw_features<B: Ops>(&self, b: &mut B, t: &B::V) -> Result<B::V> {
        let scaled: Vec<f64> = self.freqs.iter().map(|f| f * self.c_noise).collect();
        let row = b.constant(Tensor::new(&[1, scaled.len()], scaled)?);
        let arg = b.matmul(t, &row)?;
        let s = b.sin(&arg);
        let c = b.cos(&arg);
        Ok(b.concat(&[s, c], 1)?)
    }

    pub fn embed<B: Ops>(&self, b: &mut B, params: &[B::V], t: &B::V) -> Result<B::V> {
        let p = &params[self.first..self.first + 4];
        let feats = self.raw_features(b, t)?;
        let h = b.linear(&feats, &p[0], &p[1])?;
        let h = b.silu(&h);
        Ok(b.linear(&h, &p[2], &p[3])?)
    }

    /// Fold the time scale into the frequency table so that `c_noise` becomes 1
    /// while the embedding stays the same function of `t`.
    fn with_unit_c_noise(&self) -> Self {
        Self {
            c_noise: 1.0,
            freqs: self.freqs.iter().map(|f| f * self.c_noise).collect(),
            ..self.clone()
        }
    }
}

/// Teacher or student MLP.
#[derive(Debug, Clone)]
pub struct FieldNet {
    kind: NetKind,
    shape: NetShape,
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    t_embed: TimeEmbedder,
    s_embed: Option<TimeEmbedder>,
}

fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(&[fan_in, fan_out], |_| normal.sample(rng))
}

fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * n];
    for (row, &l) in labels.iter().enumerate() {
        data[row * n + l] = 1.0;
    }
    Tensor::new(&[labels.len(), n], data).expect("sized by construction")
}

impl FieldNet {
    /// A freshly initialised teacher. The output layer starts at zero, so the
    /// untrained teacher predicts a zero velocity everywhere.
    pub fn teacher<R: Rng + ?Sized>(shape: NetShape, config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let input = shape.z_dim + shape.lr_dim + config.cond_embed + config.time_embed;
        let mut width = input;
        for l in 0..config.depth {
            names.push(format!("trunk.{l}.weight"));
            params.push(init_weight(rng, width, config.hidden));
            names.push(format!("trunk.{l}.bias"));
            params.push(Tensor::zeros(&[config.hidden]));
            width = config.hidden;
        }
        names.push("trunk.out.weight".into());
        params.push(Tensor::zeros(&[width, shape.z_dim]));
        names.push("trunk.out.bias".into());
        params.push(Tensor::zeros(&[shape.z_dim]));

        names.push("cond_table".into());
        params.push(Tensor::zeros(&[shape.labels.len(), config.cond_embed]));

        if config.skip {
            for gate in ["alpha", "beta"] {
                names.push(format!("skip.{gate}.weight"));
                params.push(Tensor::zeros(&[config.time_embed, 1]));
                names.push(format!("skip.{gate}.bias"));
                params.push(Tensor::zeros(&[1]));
            }
            names.push("skip.lr.weight".into());
            params.push(init_weight(rng, shape.lr_dim, shape.z_dim));
        }

        let mut t_embed = TimeEmbedder::sinusoidal(
            config.time_features,
            config.teacher_c_noise,
            config.freq_min,
            config.freq_max,
        );
        t_embed.embed = config.time_embed;
        t_embed.first = params.len();
        let feat = t_embed.feature_dim();
        names.push("t_embed.fc1.weight".into());
        params.push(init_weight(rng, feat, config.time_embed));
        names.push("t_embed.fc1.bias".into());
        params.push(Tensor::zeros(&[config.time_embed]));
        names.push("t_embed.fc2.weight".into());
        params.push(init_weight(rng, config.time_embed, config.time_embed));
        names.push("t_embed.fc2.bias".into());
        params.push(Tensor::zeros(&[config.time_embed]));

        Ok(Self {
            kind: NetKind::Teacher,
            shape,
            config,
            names,
            params,
            t_embed,
            s_embed: None,
        })
    }

    /// Copy every teacher parameter, give the copy an `s` embedder, and switch
    /// its time transform to `c_noise(t) = t`.
    ///
    /// The `s` embedder duplicates the `t` embedder's structure and first layer;
    /// its final projection starts at zero, so the student initially reproduces
    /// the teacher exactly for every `s`. The teacher's `c_noise` coefficient is
    /// folded into the frequency table, which keeps that equality exact.
    pub fn init_student_from_teacher(teacher: &FieldNet) -> Result<Self> {
        if teacher.kind != NetKind::Teacher {
            return Err(Error::WrongKind("student init needs a teacher"));
        }
        let mut student = teacher.clone();
        student.kind = NetKind::Student;
        student.t_embed = teacher.t_embed.with_unit_c_noise();
        let mut s_embed = student.t_embed.clone();
        s_embed.first = student.params.len();
        let src = teacher.t_embed.first;
        for (i, suffix) in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].iter().enumerate() {
            student.names.push(format!("s_embed.{suffix}"));
            let p = &teacher.params[src + i];
            student
                .params
                .push(if i < 2 { p.clone() } else { Tensor::zeros(p.shape()) });
        }
        student.s_embed = Some(s_embed);
        Ok(student)
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn labels(&self) -> LabelSpace {
        self.shape.labels
    }

    pub fn t_embedder(&self) -> &TimeEmbedder {
        &self.t_embed
    }

    pub fn s_embedder(&self) -> Option<&TimeEmbedder> {
        self.s_embed.as_ref()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index range of the `s` embedder's parameters (student only).
    pub fn s_embed_params(&self) -> Option<std::ops::Range<usize>> {
        self.s_embed.as_ref().map(|e| e.first..e.first + 4)
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            h.update(n.as_bytes());
            h.update(p.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Parameters followed by the non-trainable time buffers, for serialization.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        let mut buffers = |prefix: &str, e: &TimeEmbedder| {
            out.push((
                format!("{prefix}.freqs"),
                Tensor::new(&[e.freqs.len()], e.freqs.clone()).expect("1-d"),
            ));
            out.push((format!("{prefix}.c_noise"), Tensor::new(&[1], vec![e.c_noise]).expect("1-d")));
        };
        buffers("t_embed", &self.t_embed);
        if let Some(s) = &self.s_embed {
            buffers("s_embed", s);
        }
        out
    }

    /// Rebuild a net from [`FieldNet::to_named`] output. The kind is inferred from
    /// the presence of `s_embed` tensors; every shape is checked.
    pub fn from_named(shape: NetShape, config: NetConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::teacher(shape, config, &mut rng)?;
        let is_student = named.iter().any(|(n, _)| n.starts_with("s_embed."));
        let mut net = if is_student {
            Self::init_student_from_teacher(&template)?
        } else {
            template
        };
        for (i, name) in net.names.clone().iter().enumerate() {
            let t = find(name)?;
            if t.shape() != net.params[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    net.params[i].shape()
                )));
            }
            net.params[i] = t;
        }
        let restore = |prefix: &str, e: &mut TimeEmbedder| -> Result<()> {
            let freqs = find(&format!("{prefix}.freqs"))?;
            let c = find(&format!("{prefix}.c_noise"))?;
            if freqs.len() != e.freqs.len() || c.len() != 1 {
                return Err(Error::Checkpoint(format!("bad `{prefix}` buffers")));
            }
            e.freqs = freqs.to_vec();
            e.c_noise = c.data()[0];
            Ok(())
        };
        restore("t_embed", &mut net.t_embed)?;
        if let Some(s) = net.s_embed.as_mut() {
            restore("s_embed", s)?;
        }
        Ok(net)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &l in labels {
            self.shape.labels.label(l)?;
        }
        Ok(())
    }

    /// Batched teacher velocity at a shared time `t`.
    pub fn teacher_forward(&self, z: &Tensor, t: f64, lr: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if self.kind != NetKind::Teacher {
            return Err(Error::WrongKind("teacher_forward on a student"));
        }
        let tc = Tensor::full(&[z.rows(), 1], t);
        self.forward(
            &mut Eval,
            &self.params,
            &FieldInput {
                z,
                t: &tc,
                s: None,
                lr,
                labels,
            },
        )
    }

    /// Batched student average velocity over `[t, s]`.
    pub fn student_forward(&self, z: &Tensor, t: f64, s: f64, lr: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if self.kind != NetKind::Student {
            return Err(Error::WrongKind("student_forward on a teacher"));
        }
        let tc = Tensor::full(&[z.rows(), 1], t);
        let sc = Tensor::full(&[z.rows(), 1], s);
        self.forward(
            &mut Eval,
            &self.params,
            &FieldInput {
                z,
                t: &tc,
                s: Some(&sc),
                lr,
                labels,
            },
        )
    }
}

impl Field for FieldNet {
    fn bind<B: Ops>(&self, b: &mut B) -> Vec<B::V> {
        self.params.iter().map(|p| b.param(p)).collect()
    }

    fn forward<B: Ops>(&self, b: &mut B, params: &[B::V], input: &FieldInput<'_, B::V>) -> Result<B::V> {
        self.check_labels(input.labels)?;
        let s_embed = match (self.kind, input.s, &self.s_embed) {
            (NetKind::Teacher, None, _) => None,
            (NetKind::Student, Some(s), Some(e)) => {
                let (tv, sv) = (b.value(input.t), b.value(s));
                if let Some((&t, &s)) = tv.data().iter().zip(sv.data()).find(|(t, s)| s < t) {
                    return Err(Error::TimeOrder { t, s });
                }
                Some((s, e))
            }
            (NetKind::Teacher, Some(_), _) => return Err(Error::WrongKind("teacher takes no end time")),
            _ => return Err(Error::WrongKind("student needs an end time")),
        };

        let onehot = b.constant(one_hot(input.labels, self.shape.labels.len()));
        let table = &params[2 * (self.config.depth + 1)];
        let cond = b.matmul(&onehot, table)?;
        let mut temb = self.t_embed.embed(b, params, input.t)?;
        if let Some((s, e)) = s_embed {
            let semb = e.embed(b, params, s)?;
            temb = b.add(&temb, &semb)?;
        }
        let mut h = b.concat(&[input.z.clone(), input.lr.clone(), cond, temb.clone()], 1)?;
        for l in 0..self.config.depth {
            let pre = b.linear(&h, &params[2 * l], &params[2 * l + 1])?;
            h = b.silu(&pre);
        }
        let d = self.config.depth;
        let out = b.linear(&h, &params[2 * d], &params[2 * d + 1])?;
        if !self.config.skip {
            return Ok(out);
        }
        let k = 2 * (d + 1) + 1;
        let alpha = b.linear(&temb, &params[k], &params[k + 1])?;
        let beta = b.linear(&temb, &params[k + 2], &params[k + 3])?;
        let lr_path = b.matmul(input.lr, &params[k + 4])?;
        let az = b.mul(input.z, &alpha)?;
        let bl = b.mul(&lr_path, &beta)?;
        let out = b.add(&out, &az)?;
        Ok(b.add(&out, &bl)?)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
