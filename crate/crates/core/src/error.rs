use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss of shape (1,1,1,1), got {0}")]
    NonScalarLoss(String),

    #[error("invalid model spec: field `{field}` {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("tie key `{key}` already bound to shape {existing}, requested {requested}")]
    TieConflict {
        key: String,
        existing: String,
        requested: String,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("weights do not match model: {0}")]
    WeightMismatch(String),

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("unsupported scale x{0}")]
    UnsupportedScale(u32),

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("no eligible training images: {0}")]
    EmptyCorpus(String),

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFinite { step: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn spec(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field,
            reason: reason.into(),
        }
    }
}
