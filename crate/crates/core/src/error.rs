use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("interaction file contains no rows")]
    EmptyCorpus,

    #[error("no user has more than {threshold} interactions (trajectory length k={k})")]
    EmptySplit { threshold: usize, k: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("item id {id} outside vocabulary of {vocab_size} items")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("vocabulary hash mismatch: checkpoint was trained on {expected}, dataset has {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}; last good checkpoint: {last_good}")]
    NonFiniteLoss { step: usize, last_good: String },

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the `lpdo` binary.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 1 | configuration / argument / other error |
    /// | 2 | unreadable or malformed input |
    /// | 3 | empty split after filtering |
    /// | 4 | non-finite loss during training |
    /// | 5 | vocabulary hash mismatch between checkpoint and data |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::EmptyCorpus => 2,
            Error::EmptySplit { .. } => 3,
            Error::NonFiniteLoss { .. } | Error::Numeric(_) => 4,
            Error::VocabMismatch { .. } => 5,
            _ => 1,
        }
    }
}
