use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("taxonomy structure error at node {id}: {message}")]
    Structure { id: i64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {context} of size {size}")]
    Index {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("zero-norm embedding for label {0}; cosine similarity undefined")]
    ZeroNorm(i64),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Structure { .. }
                | Error::Validation(_)
                | Error::Config { .. }
        )
    }
}
