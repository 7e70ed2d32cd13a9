use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: malformed JSON: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing required field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("could not parse a yes/no verdict from response: {raw:?}")]
    ParseFailure { raw: String },

    #[error("teacher `{teacher}` failed on item `{item_id}`: {source}")]
    Teacher {
        item_id: String,
        teacher: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot simulate item `{0}`: gold label is missing")]
    MissingGold(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },

    #[error("knowledge for item `{0}` is incomplete")]
    Incomplete(String),

    #[error("no annotation available for conflict item `{0}`")]
    MissingAnnotation(String),

    #[error("inconsistent knowledge for item `{0}`: no teacher matches the annotation")]
    Consistency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("sequence of length {len} exceeds the model context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("every target position in the batch is masked")]
    DegenerateBatch,

    #[error("preferred and rejected sequences are identical for item `{0}`")]
    InvalidPair(String),

    #[error("stage `{stage}` requires `{missing}` to have completed first")]
    Ordering { stage: String, missing: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("run directory is locked by another process: {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::MalformedLine { .. } => "malformed_line",
            Error::MissingField { .. } => "schema",
            Error::ParseFailure { .. } => "parse_failure",
            Error::Teacher { .. } => "teacher",
            Error::MissingGold(_) => "missing_gold",
            Error::Transport { .. } => "transport",
            Error::Protocol { .. } => "protocol",
            Error::Incomplete(_) => "incomplete",
            Error::MissingAnnotation(_) => "missing_annotation",
            Error::Consistency(_) => "consistency",
            Error::Unsupported(_) => "unsupported",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::Argument(_) => "argument",
            Error::Checkpoint(_) => "checkpoint",
            Error::Shape { .. } => "shape",
            Error::DegenerateBatch => "degenerate_batch",
            Error::InvalidPair(_) => "invalid_pair",
            Error::Ordering { .. } => "ordering",
            Error::GradCheck(_) => "gradcheck",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
