use std::io;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("index {index} out of range for field {field} (cardinality {cardinality})")]
    Lookup {
        field: usize,
        index: usize,
        cardinality: usize,
    },

    #[error("example {example}: {source}")]
    Example {
        example: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("trace does not match parameters: {0}")]
    Consistency(String),

    #[error("training diverged at step {step} (batch {batch} of epoch {epoch}): loss = {loss}")]
    Divergence {
        step: u64,
        epoch: u64,
        batch: usize,
        loss: f64,
    },

    #[error("checkpoint format error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("refusing oracle expansion: {0}")]
    OracleBudget(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}
