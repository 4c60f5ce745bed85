use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("malformed dump row at offset {offset}: {message}")]
    MalformedRow { offset: u64, message: String },

    #[error("malformed tag field {field:?}: {message}")]
    MalformedTags { field: String, message: String },

    #[error("invalid post {id}: {message}")]
    InvalidPost { id: u64, message: String },

    #[error("no tag reaches the threshold theta={theta}; vocabulary would be empty")]
    EmptyVocabulary { theta: u64 },

    #[error("malformed vocabulary file: {0}")]
    MalformedVocabulary(String),

    #[error("tag {0:?} is not in the vocabulary")]
    UnknownTag(String),

    #[error("a label vector needs at least one tag")]
    EmptyLabels,

    #[error("k must be in 1..=5 and not exceed {limit}, got {k}")]
    InvalidK { k: usize, limit: usize },

    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),

    #[error("weights for backbone {id:?} are not reachable at {}: {reason}", path.display())]
    WeightsUnavailable { id: String, path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("average pooling needs at least one unmasked position")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint digest mismatch for {file}")]
    DigestMismatch { file: String },

    #[error("vocabulary width mismatch: checkpoint has L={checkpoint}, requested L={requested}")]
    VocabWidthMismatch { checkpoint: usize, requested: usize },

    #[error("non-finite loss {loss} at step {step} (posts {post_ids:?})")]
    NonFiniteLoss { step: usize, loss: f64, post_ids: Vec<u64> },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no checkpoint found for variant {variant:?} at {}", path.display())]
    MissingVariant { variant: String, path: PathBuf },
}

impl Error {
    pub(crate) fn tokenizer(err: impl std::fmt::Display) -> Self {
        Error::Tokenizer(err.to_string())
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}
