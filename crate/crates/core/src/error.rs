use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-deterministic objective: f(theta) evaluated to {first} and then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset spec error: {0}")]
    Spec(String),

    #[error("dataset too small: {n} examples, need at least {min}")]
    DatasetTooSmall { n: usize, min: usize },

    #[error("numeric divergence at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("pretraining failed: train accuracy {accuracy:.3} after {epochs} epochs (minimum {minimum})")]
    Pretraining {
        accuracy: f64,
        epochs: usize,
        minimum: f64,
    },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("truncated file {path}: unexpected end of data at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than a run failing.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Spec(_) | Error::Json(_) | Error::MissingParameter(_)
        )
    }
}
