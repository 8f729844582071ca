//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset generation, the model pipeline, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A row that must be normalized has (near-)zero norm.
    #[error("normalization error: row {row} has zero norm")]
    Normalization { row: usize },

    /// A numeric quantity became NaN or otherwise invalid.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Requested more scene changes than the overlap region can hold.
    #[error("capacity error: {requested} changes requested but overlap holds only {capacity} cells")]
    Capacity { requested: usize, capacity: usize },

    /// A dataset line failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A dataset record is missing or has a malformed field.
    #[error("schema error at line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    /// Batch too small for a batch-level statistic.
    #[error("batch-size error: {0}")]
    BatchSize(String),

    /// A token id falls outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// A caption exceeds the configured maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// Target sequence contains no supervised positions.
    #[error("empty-target error: {0}")]
    EmptyTarget(String),

    /// Unknown component or variant name passed to a harness.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
