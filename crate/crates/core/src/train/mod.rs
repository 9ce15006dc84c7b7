//! Optimisation, checkpoints and the two training procedures.
//!
//! [`train_teacher`] minimises the rectified-flow loss. [`distill_student`]
//! initialises a student from a frozen teacher and minimises the distillation
//! loss. Both are pure functions of the [`RunConfig`]: the same configuration
//! gives bit-identical parameters, checkpoints and loss curves, and resuming from
//! a periodic checkpoint continues exactly where the uninterrupted run would be.

mod adam;
mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, RngState, DTYPE_F64, MAGIC, VERSION};
pub use config::{LrSchedule, RunConfig, SampleConfig, TrainConfig, REFERENCE_LR};

use crate::data::{Augment, Dataset};
use crate::flow::{mfd_loss, rf_loss};
use crate::nets::{Bound, Field, FieldNet, NetKind, NetShape};
use crate::tensor::{Graph, Ops, Tensor};
use crate::{Error, Result};

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const STUDENT_LOG: &str = "student_log.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// One row of the training log. `wall_ms` is elapsed wall time and is the only
/// field that differs between otherwise identical runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,grad_norm,wall_ms\n");
    for r in rows {
        writeln!(out, "{},{:e},{:e},{}", r.step, r.loss, r.grad_norm, r.wall_ms).expect("writing to a String");
    }
    out
}

fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Invalid(format!("malformed log line `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                grad_norm: f[2].parse().map_err(|_| bad())?,
                wall_ms: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Where a run reads and writes files. With `out == None` nothing touches disk.
#[derive(Debug, Clone, Default)]
pub struct RunIo {
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl RunIo {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_dir(out: impl Into<PathBuf>) -> Self {
        Self {
            out: Some(out.into()),
            resume: None,
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if let Some(dir) = &self.out {
            ckpt.save(&dir.join(name))?;
        }
        Ok(())
    }

    fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.write(RESOLVED_CONFIG, cfg.to_toml().as_bytes())?;
        }
        Ok(())
    }
}

/// Network shape implied by the task.
pub fn net_shape(ds: &Dataset) -> NetShape {
    NetShape {
        z_dim: ds.z_dim(),
        lr_dim: ds.lr_dim(),
        labels: ds.labels(),
    }
}

/// Training state for either network.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: FieldNet,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub checkpoint: Checkpoint,
}

fn make_checkpoint(cfg: &RunConfig, net: &FieldNet, adam: &AdamState, rng: &ChaCha8Rng) -> Checkpoint {
    let mut tensors = net.to_named();
    for (name, m) in net.param_names().iter().zip(&adam.m) {
        tensors.push((format!("adam.m.{name}"), m.clone()));
    }
    for (name, v) in net.param_names().iter().zip(&adam.v) {
        tensors.push((format!("adam.v.{name}"), v.clone()));
    }
    Checkpoint {
        config_digest: cfg.digest(),
        step: adam.step,
        rng: RngState::capture(rng),
        config: cfg.to_toml(),
        tensors,
    }
}

fn restore_adam(ckpt: &Checkpoint, net: &FieldNet, config: AdamConfig) -> Result<AdamState> {
    let mut adam = AdamState::new(net.params(), config);
    adam.step = ckpt.step;
    for (i, name) in net.param_names().iter().enumerate() {
        for (prefix, buf) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            let key = format!("{prefix}{name}");
            let t = ckpt
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != net.params()[i].shape() {
                return Err(Error::Checkpoint(format!("tensor `{key}` has the wrong shape")));
            }
            buf[i] = t.clone();
        }
    }
    Ok(adam)
}

/// Rebuild a network from a checkpoint written under `cfg`.
pub fn net_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<FieldNet> {
    let ds = Dataset::from_config(&cfg.task)?;
    let named: Vec<(String, Tensor)> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("adam."))
        .cloned()
        .collect();
    FieldNet::from_named(net_shape(&ds), cfg.net.clone(), &named)
}

/// Load a checkpoint holding a network of `kind` and check that it was trained
/// for the same task and architecture as `cfg`.
pub fn load_net(cfg: &RunConfig, path: &Path, kind: NetKind) -> Result<FieldNet> {
    let ckpt = Checkpoint::load(path)?;
    let theirs = RunConfig::from_toml(&ckpt.config)?;
    if theirs.task != cfg.task {
        return Err(Error::Mismatch(format!(
            "{} was trained on task {:?}, run uses {:?}",
            path.display(),
            theirs.task,
            cfg.task
        )));
    }
    if theirs.net != cfg.net {
        return Err(Error::Mismatch(format!(
            "{} has net {:?}, run uses {:?}",
            path.display(),
            theirs.net,
            cfg.net
        )));
    }
    let net = net_from_checkpoint(&theirs, &ckpt)?;
    if net.kind() != kind {
        return Err(Error::Mismatch(format!(
            "{} holds a {:?} network, expected {:?}",
            path.display(),
            net.kind(),
            kind
        )));
    }
    Ok(net)
}

pub fn load_teacher(cfg: &RunConfig, path: &Path) -> Result<FieldNet> {
    load_net(cfg, path, NetKind::Teacher)
}

pub fn load_student(cfg: &RunConfig, path: &Path) -> Result<FieldNet> {
    load_net(cfg, path, NetKind::Student)
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    train: &'a TrainConfig,
    io: &'a RunIo,
    log_name: &'static str,
    ckpt_name: &'static str,
    prefix: &'static str,
}

impl Loop<'_> {
    /// Shared optimisation loop. `loss_fn` builds the scalar loss on a fresh graph
    /// and returns it with the student (or teacher) parameter handles.
    fn run<F>(&self, mut net: FieldNet, rng_stream: u64, mut loss_fn: F) -> Result<Trained>
    where
        F: FnMut(&mut Graph, &FieldNet, &mut ChaCha8Rng) -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>)>,
    {
        self.io.prepare(self.cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(rng_stream);
        let mut adam = AdamState::new(net.params(), self.train.adam());
        let mut log = Vec::new();
        if let Some(path) = &self.io.resume {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_digest != self.cfg.digest() {
                return Err(Error::Mismatch(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            let restored = net_from_checkpoint(self.cfg, &ckpt)?;
            if restored.kind() != net.kind() {
                return Err(Error::Mismatch(format!("{} holds the wrong network kind", path.display())));
            }
            net = restored;
            adam = restore_adam(&ckpt, &net, self.train.adam())?;
            rng = ckpt.rng.restore();
            if let Some(dir) = &self.io.out {
                if let Ok(text) = std::fs::read_to_string(dir.join(self.log_name)) {
                    log = parse_log(&text)?.into_iter().filter(|r| r.step < ckpt.step).collect();
                }
            }
        }
        let start = Instant::now();
        let total = self.train.steps;
        while adam.step < total {
            let step = adam.step;
            let mut g = Graph::new();
            let (loss, vars) = loss_fn(&mut g, &net, &mut rng)?;
            let lv = g.value(&loss).data()[0];
            if !lv.is_finite() {
                self.io.write(self.log_name, log_csv(&log).as_bytes())?;
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(loss)?;
            let mut gs: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
            let (norm, clipped) = clip_grad_norm(&mut gs, self.train.grad_clip);
            if clipped {
                log::debug!("{} step {step}: gradient norm {norm:.3e} clipped to {}", self.prefix, self.train.grad_clip);
            }
            let names = net.param_names().to_vec();
            adam.config.lr = self.train.lr_at(step);
            if let Err(e) = adam.step(net.params_mut(), &gs, &names) {
                self.io.write(self.log_name, log_csv(&log).as_bytes())?;
                return Err(e);
            }
            let done = adam.step;
            if step % self.train.log_every.max(1) == 0 || done == total {
                let row = LogRow {
                    step,
                    loss: lv,
                    grad_norm: norm,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                log::info!("{} step {step}: loss {lv:.5e} grad_norm {norm:.3e}", self.prefix);
                log.push(row);
            }
            if self.train.checkpoint_every > 0 && done % self.train.checkpoint_every == 0 && done < total {
                let ckpt = make_checkpoint(self.cfg, &net, &adam, &rng);
                self.io.save(&format!("{}_step{done}.ckpt", self.prefix), &ckpt)?;
                self.io.write(self.log_name, log_csv(&log).as_bytes())?;
            }
        }
        let checkpoint = make_checkpoint(self.cfg, &net, &adam, &rng);
        self.io.save(self.ckpt_name, &checkpoint)?;
        self.io.write(self.log_name, log_csv(&log).as_bytes())?;
        Ok(Trained {
            net,
            adam,
            log,
            checkpoint,
        })
    }
}

/// Train a teacher on the configured task by minimising the rectified-flow loss.
pub fn train_teacher(cfg: &RunConfig, io: &RunIo) -> Result<Trained> {
    cfg.validate()?;
    let ds = Dataset::from_config(&cfg.task)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = FieldNet::teacher(net_shape(&ds), cfg.net.clone(), &mut init_rng)?;
    let aug = match ds {
        Dataset::ToySr(_) => cfg.augment,
        _ => Augment {
            p_neg: 0.0,
            ..cfg.augment
        },
    };
    let lp = Loop {
        cfg,
        train: &cfg.teacher,
        io,
        log_name: TEACHER_LOG,
        ckpt_name: TEACHER_CHECKPOINT,
        prefix: "teacher",
    };
    lp.run(net, 1, |g, net, rng| {
        let batch = ds.make_batch(cfg.teacher.batch_size, rng, 0.0, &aug)?;
        let vars = net.bind(g);
        let loss = rf_loss(g, Bound::new(net, &vars), &batch)?;
        Ok((loss, vars))
    })
}

/// Distill `teacher` into a student. The teacher is only read; its parameter
/// digest is checked before and after.
pub fn distill_student(cfg: &RunConfig, teacher: &FieldNet, io: &RunIo) -> Result<Trained> {
    cfg.validate()?;
    let ds = Dataset::from_config(&cfg.task)?;
    if teacher.kind() != NetKind::Teacher {
        return Err(Error::Mismatch("distillation needs a teacher network".into()));
    }
    if *teacher.shape() != net_shape(&ds) || *teacher.config() != cfg.net {
        return Err(Error::Mismatch(format!(
            "teacher shape {:?} / net {:?} do not match the run's {:?} / {:?}",
            teacher.shape(),
            teacher.config(),
            net_shape(&ds),
            cfg.net
        )));
    }
    let before = teacher.digest();
    let student = FieldNet::init_student_from_teacher(teacher)?;
    let space = ds.labels();
    let lp = Loop {
        cfg,
        train: &cfg.student,
        io,
        log_name: STUDENT_LOG,
        ckpt_name: STUDENT_CHECKPOINT,
        prefix: "student",
    };
    let out = lp.run(student, 2, |g, student, rng| {
        let batch = ds.make_batch(cfg.student.batch_size, rng, cfg.loss.ratio_r, &Augment::none())?;
        let sp = student.bind(g);
        let tp: Vec<_> = teacher.params().iter().map(|p| g.constant(p.clone())).collect();
        let loss = mfd_loss(
            g,
            Bound::new(student, &sp),
            Bound::new(teacher, &tp),
            space,
            &batch,
            &cfg.cfg,
            &cfg.loss,
        )?;
        Ok((loss, sp))
    })?;
    if teacher.digest() != before {
        return Err(Error::Mismatch("teacher parameters changed during distillation".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_toml_with(
            "",
            &[
                "net.hidden=16".into(),
                "net.depth=1".into(),
                "net.time_features=8".into(),
                "net.time_embed=8".into(),
                "net.cond_embed=4".into(),
                "teacher.steps=6".into(),
                "teacher.batch_size=8".into(),
                "teacher.log_every=1".into(),
                "student.steps=4".into(),
                "student.batch_size=8".into(),
                "student.log_every=1".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn first_loss_is_data_spread() {
        // the output layer starts at zero, so the first loss is mean ‖z1 - z0‖²
        let cfg = tiny();
        let run = train_teacher(&cfg, &RunIo::in_memory()).unwrap();
        let ds = Dataset::from_config(&cfg.task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let aug = Augment {
            p_neg: 0.0,
            ..cfg.augment
        };
        let b = ds.make_batch(8, &mut rng, 0.0, &aug).unwrap();
        let expected = b.z1.sub(&b.z0).unwrap().sq_norm() / 8.0;
        assert_eq!(run.log[0].loss, expected);
    }

    #[test]
    fn identical_configs_identical_runs() {
        let cfg = tiny();
        let a = train_teacher(&cfg, &RunIo::in_memory()).unwrap();
        let b = train_teacher(&cfg, &RunIo::in_memory()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let losses = |r: &Trained| r.log.iter().map(|l| (l.step, l.loss, l.grad_norm)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn distillation_leaves_teacher_alone() {
        let cfg = tiny();
        let teacher = train_teacher(&cfg, &RunIo::in_memory()).unwrap().net;
        let digest = teacher.digest();
        let student = distill_student(&cfg, &teacher, &RunIo::in_memory()).unwrap();
        assert_eq!(teacher.digest(), digest);
        assert_eq!(student.net.kind(), NetKind::Student);
        assert_eq!(student.adam.step, 4);
    }

    #[test]
    fn mismatched_teacher_is_rejected() {
        let cfg = tiny();
        let teacher = train_teacher(&cfg, &RunIo::in_memory()).unwrap().net;
        let mut other = cfg.clone();
        other.net.hidden = 12;
        assert!(matches!(
            distill_student(&other, &teacher, &RunIo::in_memory()),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn exploding_lr_aborts() {
        let mut cfg = tiny();
        cfg.teacher.lr = 1e300;
        cfg.teacher.grad_clip = 0.0;
        cfg.teacher.steps = 50;
        let err = train_teacher(&cfg, &RunIo::in_memory()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn log_round_trip() {
        let rows = vec![LogRow {
            step: 3,
            loss: 0.125,
            grad_norm: 2.5,
            wall_ms: 17,
        }];
        assert_eq!(parse_log(&log_csv(&rows)).unwrap(), rows);
    }
}
