use std::path::PathBuf;

use anchorinv_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("class {class} has {have} samples, {need} required")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("class {0} is already registered")]
    DuplicateClass(usize),
    #[error("non-finite loss in {stage} at step {step}")]
    Diverged { stage: &'static str, step: usize },
    #[error("frozen tensor `{0}` changed during finetuning")]
    FrozenMutated(String),
    #[error("feature statistics missing from model state")]
    MissingFeatureStats,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("trial {trial}, method {method}: {source}")]
    Trial {
        trial: usize,
        method: &'static str,
        #[source]
        source: Box<CoreError>,
    },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
