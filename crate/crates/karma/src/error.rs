//! Crate-wide error type.

use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KarmaError {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate record id `{id}`")]
    DuplicateId { id: String },

    #[error("dataset too small: {detail}")]
    TooSmall { detail: String },

    #[error("empty corpus: no tokens to build a vocabulary from")]
    EmptyCorpus,

    #[error("conditioned serialization requested but instance carries no metadata")]
    MissingMetadata,

    #[error("degenerate synthetic corpus config: {detail}")]
    DegenerateConfig { detail: String },

    #[error("sequence mode does not match model mode ({detail})")]
    ModeMismatch { detail: String },

    #[error("training labels are single-class; both classes are required")]
    DegenerateLabels,

    #[error("training aborted: {detail}")]
    AbortTraining { detail: String },

    #[error("vocabulary mismatch: {detail}")]
    VocabMismatch { detail: String },

    #[error("token id {id} out of vocabulary range {size}")]
    OutOfVocab { id: u32, size: usize },

    #[error("too few nonzero pairs for the signed-rank test: {n_effective} (need >= 5)")]
    TooFewPairs { n_effective: usize },

    #[error("degenerate input: {detail}")]
    Degenerate { detail: String },

    #[error("empty prompt set")]
    EmptyPrompts,

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    PlainIo(#[from] std::io::Error),
}

impl KarmaError {
    /// True for failures of the numeric core (NaN/Inf, aborted optimization),
    /// as opposed to bad input data. CLI maps these to a distinct exit code.
    pub fn is_numeric_abort(&self) -> bool {
        match self {
            KarmaError::AbortTraining { .. } => true,
            KarmaError::Tensor(e) => matches!(
                e,
                TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }
            ),
            _ => false,
        }
    }
}
