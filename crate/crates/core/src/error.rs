//! Crate-wide error type.
//!
//! Every failure carries enough coordinates to act on it: shape mismatches
//! name the primitive and both shapes, CSV errors name row and column,
//! numerical failures report the offending quantity.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch, got {got:?}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        got: Vec<usize>,
        expected: String,
    },

    #[error("{op}: non-finite value encountered ({context})")]
    NonFinite { op: &'static str, context: String },

    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error(
        "matrix factorization failed: not positive definite at pivot {pivot} \
         (diagonal {diag:.3e}, jitter exhausted at {jitter:.3e}); \
         estimated condition number {cond:.3e}"
    )]
    SingularMatrix {
        pivot: usize,
        diag: f64,
        jitter: f64,
        cond: f64,
    },

    #[error("csv parse error at row {row}, column {col}: {message}")]
    CsvParse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("csv schema error: {message}")]
    CsvSchema { message: String },

    #[error("dataset error: {message}")]
    Dataset { message: String },

    #[error(
        "window config invalid: sequence length {n} with window {window} and stride {stride}: {message}"
    )]
    Window {
        n: usize,
        window: usize,
        stride: usize,
        message: String,
    },

    #[error("split error: {message}")]
    Split { message: String },

    #[error("alignment error: {message}")]
    Alignment { message: String },

    #[error("query outside training bounding box in dimension {dim}: {value} not in [{lo}, {hi}]")]
    OutOfBox {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint error: {message}")]
    Checkpoint { message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            message: message.into(),
        }
    }
}
