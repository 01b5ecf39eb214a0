use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("tensor belongs to a different tape")]
    ForeignTensor,

    #[error("tensor refers to discarded tape node {node}")]
    StaleTensor { node: usize },

    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("{op} is undefined for input {value} at element {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("degenerate logit-gap gradient (norm {norm:e}) at attack step {step}")]
    DegenerateGradient { step: usize, norm: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("IDX parse error at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("data is not linearly separable")]
    Infeasible,

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("training diverged at epoch {epoch}, step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
