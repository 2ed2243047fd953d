use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest at line {line}: {message}")]
    MalformedManifest { line: usize, message: String },

    #[error("invariant violated in record {record}, field `{field}`: {message}")]
    InvariantViolation {
        record: usize,
        field: String,
        message: String,
    },

    #[error("missing media file: {0}")]
    MissingMedia(PathBuf),

    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },

    #[error("audio is empty (shorter than one hop)")]
    EmptyAudio,

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("video has no frames")]
    EmptyVideo,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("adapter already merged into its base weight")]
    DoubleMerge,

    #[error("sequence of {len} positions exceeds context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("unknown emotion label `{0}`")]
    UnknownEmotion(String),

    #[error("cannot parse model output: {0}")]
    Parse(String),

    #[error("record is missing required field `{0}`")]
    MissingField(&'static str),

    #[error("loss mask selects no positions")]
    EmptyTarget,

    #[error("frozen parameter group `{0}` changed during training")]
    FrozenGroupViolation(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("corpus contains no tokens")]
    EmptyCorpus,

    #[error("perplexity scorer failed: {0}")]
    ScorerFailure(String),

    #[error("unknown session `{0}`")]
    UnknownSession(String),

    #[error("server has no checkpoint loaded")]
    ServerNotReady,

    #[error("generation timed out")]
    GenerationTimeout,

    #[error("a single round needs {tokens} tokens but the budget is {budget}")]
    TurnTooLarge { tokens: usize, budget: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(record: usize, field: &str, message: impl Into<String>) -> Self {
        Error::InvariantViolation {
            record,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn decode(path: impl std::fmt::Display, message: impl std::fmt::Display) -> Self {
        Error::Decode {
            path: path.to_string(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the input data rather than configuration or runtime.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedManifest { .. }
                | Error::InvariantViolation { .. }
                | Error::MissingMedia(_)
                | Error::Decode { .. }
                | Error::EmptyAudio
                | Error::SampleRateMismatch { .. }
                | Error::EmptyVideo
                | Error::UnknownEmotion(_)
                | Error::MissingField(_)
        )
    }
}
