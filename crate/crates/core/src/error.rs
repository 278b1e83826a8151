use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown operation tag `{0}`")]
    UnknownOp(String),

    #[error("invalid attribute for {op}: {detail}")]
    Attr { op: &'static str, detail: String },

    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a tensor that does not depend on any trainable leaf")]
    Detached,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("layer count mismatch: prompt has {prompt} layers, stack has {stack}")]
    LayerMismatch { prompt: usize, stack: usize },

    #[error("sequence too long: {component} pushes length to {len}, max is {max}")]
    SequenceTooLong {
        component: String,
        len: usize,
        max: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("knowledge sequence length {got} does not match step {step} (expected {expected})")]
    ChainLength {
        step: usize,
        expected: usize,
        got: usize,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("step {step} beyond schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}:{line}: field `{field}`: {detail}")]
    Record {
        path: String,
        line: usize,
        field: String,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing upstream artifact for stage `{stage}`: {path}")]
    MissingStage { stage: &'static str, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn attr(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Attr {
            op,
            detail: detail.into(),
        }
    }
}
