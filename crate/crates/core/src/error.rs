//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! subsystem that raises them; `detail` strings carry the offending values so
//! failures are actionable without a debugger.

use thiserror::Error;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes (matmul, add, concat, ...).
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A scalar or dimension argument is outside its allowed range.
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A model configuration fails validation.
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    /// An iterative numerical routine failed to converge.
    #[error("{op} did not converge: {detail}")]
    ConvergenceFailure { op: &'static str, detail: String },

    /// Input matrix is not symmetric to within the requested tolerance.
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:e} exceeds tolerance {tol:e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    /// A calibration set carries no usable signal (all-zero features).
    #[error("degenerate calibration set: {0}")]
    DegenerateCalibration(String),

    /// A shard plan cannot be built from the requested device/group counts.
    #[error("invalid shard plan: {0}")]
    InvalidPlan(String),

    /// A sharded operation was invoked without the per-slice scaling
    /// constants it needs.
    #[error("missing transform constants: {0}")]
    MissingTransformConstants(String),

    /// An operation was asked to run under a plan mode it does not support.
    #[error("unsupported plan for {op}: {detail}")]
    UnsupportedPlan { op: &'static str, detail: String },

    /// A binary container file is malformed or describes the wrong payload.
    #[error("container format error: {0}")]
    ContainerFormat(String),

    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure for headers, configs, and reports.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for [`Error::ShapeMismatch`].
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Shorthand for [`Error::InvalidArgument`].
    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
