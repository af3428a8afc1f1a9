use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("interpolation undefined: {0}")]
    Degenerate(&'static str),

    #[error("embedding norm {norm:.6} outside valid band [{lo:.6}, {hi:.6}]")]
    NormOutOfBand { norm: f64, lo: f64, hi: f64 },

    #[error("image {height}x{width} unsupported: {reason}")]
    ImageSize {
        height: usize,
        width: usize,
        reason: &'static str,
    },

    #[error("NaN gradient at iteration {iteration}")]
    NanGradient { iteration: usize },

    #[error("NaN loss at step {step}")]
    NanLoss { step: usize },

    #[error("cannot select {k} elements from a pool of {pool}")]
    SelectionSize { k: usize, pool: usize },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("every candidate was clamped, even after regenerating the pool")]
    AllCandidatesClamped,

    #[error("no choice set for step {step}")]
    StaleChoices { step: usize },

    #[error("choice index {index} out of range for {k} choices")]
    ChoiceIndex { index: usize, k: usize },

    #[error("history is empty")]
    EmptyHistory,

    #[error("session log replay failed at {event} event: {reason}")]
    Replay { event: String, reason: String },

    #[error("{path}: bad magic, expected EMB1")]
    EmbMagic { path: PathBuf },

    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    EmbTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: expected {expected_rows}x{expected_dim}, file holds {rows}x{dim}")]
    EmbDims {
        path: PathBuf,
        expected_rows: usize,
        expected_dim: usize,
        rows: usize,
        dim: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
