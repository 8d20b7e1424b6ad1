//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension `{dim}` mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: shape {shape:?} does not hold {len} elements")]
    ShapeLenMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: window {window} exceeds padded input extent {extent}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        extent: usize,
    },

    #[error("{op}: probability {value} outside [{lo}, {hi})")]
    BadProbability {
        op: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("negative AQI value {0}")]
    NegativeAqi(i64),

    #[error("grade {0} outside 1..=6")]
    BadGrade(i64),

    #[error("image {width}x{height} too small for {op} (needs at least {min})")]
    ImageTooSmall {
        op: &'static str,
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("manifest {path}: line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    ImageFile { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("parameter `{name}` has no gradient (required for update)")]
    MissingGradient { name: String },

    #[error("non-finite loss ({value}) at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
