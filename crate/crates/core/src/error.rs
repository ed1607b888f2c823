//! Crate-wide error type.

use std::fmt;

/// Every fallible operation in the crate returns this.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// A stated precondition was violated.
    Contract(String),
    /// Invalid model or layer specification.
    Spec(String),
    /// Invalid task or experiment configuration.
    Config(String),
    /// Synthetic-data generation failed.
    Generation(String),
    /// Batch sampling failed (e.g. empty pool).
    Sampling(String),
    /// Malformed record in an external data file.
    Parse { record: usize, msg: String },
    /// Training aborted on a non-finite loss or gradient.
    Diverged { step: usize },
    /// Every grid point failed; the payload lists each failure.
    GridAllFailed(Vec<String>),
    /// PCA export failed.
    Export(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "non-finite output in {op}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Spec(msg) => write!(f, "invalid spec: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Sampling(msg) => write!(f, "sampling error: {msg}"),
            Error::Parse { record, msg } => write!(f, "parse error at record {record}: {msg}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
            Error::GridAllFailed(failures) => {
                write!(f, "all grid points failed: [{}]", failures.join("; "))
            }
            Error::Export(msg) => write!(f, "export error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
