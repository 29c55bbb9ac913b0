use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::TraceRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field holds an unusable value.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("dimension chain broken at layer {layer}: expected input width {expected}, got {actual}")]
    LayerChain {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("operation `{op}` requires {required} discrepancy, model uses {actual}")]
    Mode {
        op: &'static str,
        required: &'static str,
        actual: &'static str,
    },

    #[error("input {name}={value} outside domain {domain}")]
    Domain {
        name: String,
        value: f64,
        domain: &'static str,
    },

    #[error("index {index} out of range for {what} with {len} rows")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value in parameter block `{block}`")]
    NonFinite { block: String },

    #[error("optimization diverged after {iterations} consecutive non-finite iterations")]
    Divergence {
        iterations: usize,
        trace: Vec<TraceRecord>,
    },

    #[error("oracle refused: {0}")]
    OracleGuard(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-run calibration with this release to regenerate it")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::shape(context, expected, actual))
        }
    }
}
