//! A desk-scale laboratory for MeanFlow distillation of flow-matching models.
//!
//! The pipeline trains a rectified-flow teacher `v(z, t | z_lr, c)`, distills it
//! into an average-velocity student `u(z, t, s | z_lr, c)` with a JVP-based
//! regression target and teacher classifier-free guidance, and samples the student
//! in one or a few steps. A closed-form Gaussian flow supplies exact velocities,
//! flow maps and average velocities against which every piece is checked.
//!
//! Module map:
//! - [`tensor`]: dense tensors, reverse mode ([`tensor::Graph`]) and forward mode
//!   ([`tensor::jvp`]).
//! - [`nets`]: teacher/student MLP velocity fields with sinusoidal time embedders.
//! - [`flow`]: interpolation, losses, timestep sampling, guidance, distillation target.
//! - [`analytic`]: exact Gaussian-to-Gaussian flow used as ground truth.
//! - [`data`]: toy datasets, degradation pipeline, batches, PGM output.
//! - [`train`]: Adam, checkpoints, run configuration, the two training loops.
//! - [`sampler`]: samplers and desk-scale metrics.
//! - [`par`]: data-parallel helpers with a sequential fallback.

pub mod analytic;
pub mod data;
pub mod flow;
pub mod nets;
pub mod par;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown condition label {id} (model has {n_labels} labels)")]
    UnknownLabel { id: usize, n_labels: usize },
    #[error("label {id} is a {role} label, expected {expected}")]
    LabelRole {
        id: usize,
        role: &'static str,
        expected: &'static str,
    },
    #[error("end time s={s} precedes start time t={t}")]
    TimeOrder { t: f64, s: f64 },
    #[error("network kind mismatch: {0}")]
    WrongKind(&'static str),
    #[error("guidance mode {mode} needs {what}")]
    MissingInput {
        mode: &'static str,
        what: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown distribution `{0}` (valid: checkerboard, two_moons, ring)")]
    UnknownDistribution(String),
    #[error("scale {scale} does not divide image size {height}x{width}")]
    Scale {
        scale: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("teacher/student mismatch: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (NaN/inf) rather than input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFiniteGradient(_) | Self::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
