use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate aggregate at row {row}: Lorentz norm {norm:e} is below 1e-12")]
    DegenerateAggregate { row: usize, norm: f64 },

    #[error("parse error in {path}: {field}: {detail}")]
    Parse {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite loss at epoch {epoch}, bag {bag}: first non-finite tensor is {tensor}")]
    NonFiniteLoss {
        epoch: usize,
        bag: String,
        tensor: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
