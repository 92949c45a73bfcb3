use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not agree.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a value contract (labels out of range and similar).
    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// An attention row whose normalizer collapsed to zero.
    #[error("degenerate kernel normalizer {value:e} at row {row}")]
    DegenerateKernel { row: usize, value: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("capacity exceeded: need {needed} bytes, cap is {cap}")]
    Capacity { needed: u64, cap: u64 },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
