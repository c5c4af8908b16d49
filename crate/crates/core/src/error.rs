use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,

    #[error("model width {d_model} is not divisible by {heads} heads")]
    HeadsMismatch { d_model: usize, heads: usize },

    #[error("at least one part token is required")]
    EmptyParts,

    #[error("part row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("exact matching supports at most {max} parts, got {n}")]
    TooManyParts { n: usize, max: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("expected {expected} stages, got {got}")]
    StageCount { expected: usize, got: usize },

    #[error("part proposal failed: {0}")]
    Proposal(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NanLoss { .. } | Error::NonFinite(_) => 2,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
