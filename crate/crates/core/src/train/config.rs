//! Run configuration: a TOML document, optionally patched with dotted
//! `key=value` overrides, validated before any compute.
//!
//! ```toml
//! seed = 0
//!
//! [task]
//! kind = "gaussian"        # gaussian | gen2d | toysr
//! mu = [1.0, -0.5]
//! sigma = 0.5
//!
//! [net]
//! hidden = 128
//! depth = 3
//!
//! [teacher]
//! steps = 4000
//! batch_size = 256
//! lr = 1e-3
//!
//! [student]
//! steps = 2000
//!
//! [cfg]
//! mode = "teacher_null"    # gt | original_mf | teacher_null | teacher_neg
//! w = 0.0
//!
//! [loss]
//! metric = "pseudo_huber"  # squared_l2 | pseudo_huber
//! ratio_r = 0.5
//!
//! [sample]
//! steps = 1
//! n_samples = 1000
//! ```
//!
//! Every table and key is optional; missing values take their defaults and
//! unknown keys are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augment, TaskConfig};
use crate::flow::{CfgConfig, LossConfig};
use crate::nets::NetConfig;
use crate::{Error, Result};

/// Learning rate from the reference implementation, recorded for comparison;
/// the small desk-scale nets train with the larger `lr`.
pub const REFERENCE_LR: f64 = 5e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr * lr_final_frac` over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lr_final_frac: f64,
    pub reference_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub log_every: u64,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            lr_final_frac: 0.0,
            reference_lr: REFERENCE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, section: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{section}.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return bad(format!("lr_final_frac must lie in [0, 1], got {}", self.lr_final_frac));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("beta1, beta2 must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                let lo = self.lr * self.lr_final_frac;
                lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn adam(&self) -> super::AdamConfig {
        super::AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Student sampling steps.
    pub steps: usize,
    /// Teacher Euler steps for reference samples.
    pub teacher_steps: usize,
    pub n_samples: usize,
    /// Step counts for the evaluation sweep.
    pub sweep: Vec<usize>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            teacher_steps: 256,
            n_samples: 1000,
            sweep: vec![1, 2, 4],
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub task: TaskConfig,
    pub net: NetConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    /// Label dropout and negative pairing during teacher training.
    pub augment: Augment,
    /// Teacher checkpoint for distillation; `<out>/teacher.ckpt` when absent.
    pub teacher_checkpoint: Option<String>,
    pub cfg: CfgConfig,
    pub loss: LossConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            task: TaskConfig::default(),
            net: NetConfig::default(),
            teacher: TrainConfig::default(),
            student: TrainConfig::default(),
            augment: Augment::default(),
            teacher_checkpoint: None,
            cfg: CfgConfig::default(),
            loss: LossConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

/// Set `path` (dotted) inside `table` to `raw`, parsed as a TOML value when it
/// is one and taken as a bare string otherwise.
fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text and apply `key=value` overrides in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.teacher.validate("teacher")?;
        self.augment.validate()?;
        self.student.validate("student")?;
        self.cfg.validate()?;
        self.loss.validate()?;
        if self.sample.steps == 0 || self.sample.teacher_steps == 0 || self.sample.sweep.contains(&0) {
            return Err(Error::Config("sample step counts must be positive".into()));
        }
        if self.sample.n_samples == 0 {
            return Err(Error::Config("sample.n_samples must be positive".into()));
        }
        crate::data::Dataset::from_config(&self.task)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dist2d, SrConfig};
    use crate::flow::CfgMode;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.task = TaskConfig::Toysr(SrConfig::default());
        cfg.loss.huber_c = Some(0.1);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.task = TaskConfig::Gen2d { dist: Dist2d::Ring };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::from_toml_with(
            "seed = 3\n[cfg]\nmode = \"gt\"\n",
            &[
                "cfg.mode=teacher_null".into(),
                "cfg.w=2".into(),
                "teacher.steps=7".into(),
                "task.kind=gen2d".into(),
                "task.dist=ring".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.cfg.mode, CfgMode::TeacherNull);
        assert_eq!(cfg.cfg.w, 2.0);
        assert_eq!(cfg.teacher.steps, 7);
        assert_eq!(cfg.task, TaskConfig::Gen2d { dist: Dist2d::Ring });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml_with("", &["teacher.stepz=3".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["task.kind=toysr".into(), "task.sigma=1".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["nokey".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[cfg]\nkappa = 1.0").is_err());
        assert!(RunConfig::from_toml("[teacher]\nbatch_size = 0").is_err());
        assert!(RunConfig::from_toml("[task]\nkind = \"gaussian\"\nmu = [1.0]\nsigma = -1.0").is_err());
        assert!(RunConfig::from_toml("[task]\nkind = \"toysr\"\nhr_size = 30").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let t = TrainConfig {
            steps: 100,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            lr_final_frac: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 1e-3);
        assert!((t.lr_at(50) - 5.5e-4).abs() < 1e-15);
        assert!((t.lr_at(100) - 1e-4).abs() < 1e-15);
        assert_eq!(TrainConfig::default().lr_at(77), 1e-3);
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
