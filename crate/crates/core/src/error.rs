use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("template validation failed: {message} (ids: {})", ids.join(", "))]
    Validation { message: String, ids: Vec<String> },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("phrase expander unavailable: {0}")]
    ExpanderUnavailable(String),

    #[error("extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("encoder failed for study `{study_id}`: {reason}")]
    EncoderFailure { study_id: String, reason: String },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
