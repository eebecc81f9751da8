use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("unknown frame id {0}")]
    UnknownFrame(u64),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("parameter {name}: {message}")]
    Param { name: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
