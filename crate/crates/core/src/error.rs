use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate record id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("invalid record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("degenerate projection for source `{source_name}`: {message}")]
    DegenerateProjection {
        source_name: String,
        message: String,
    },

    #[error("record `{record_id}` has no projection spec for source `{source_name}`")]
    MissingSpec {
        record_id: String,
        source_name: String,
    },

    #[error("record `{record_id}` has no margin for source `{source_name}`")]
    MissingMargin {
        record_id: String,
        source_name: String,
    },

    #[error("insufficient records: requested {requested}, available {available}")]
    Insufficient { requested: usize, available: usize },

    #[error("no eligible records after excluding negative margins")]
    NoEligible,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
