//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the decoding pipeline can report.
///
/// Variants are grouped by the kind of caller mistake or numeric condition
/// they describe, so the CLI can map them onto stable machine-readable codes
/// (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite values, overflow in a spectral function, or a matrix that
    /// is not (numerically) positive definite.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Dimensions or channel counts disagree.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// An argument is outside its documented range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An iterative solver did not reach its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        /// Last iterate, row-major.
        last_iterate: Vec<f64>,
    },

    /// Input carries no usable signal (e.g. an all-zero window).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Fewer fixation samples than required and no prior reference to reuse.
    #[error("no reference available: {0}")]
    NoReference(String),

    /// No threshold satisfies the latency cap; the best unconstrained
    /// threshold is returned for callers that want to proceed anyway.
    #[error("no threshold meets the latency cap of {cap} s (unconstrained best: {fallback_theta})")]
    ConstraintInfeasible { cap: f64, fallback_theta: f64 },

    /// AUC needs both classes.
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    /// Signed-rank test with no non-zero differences (or too many for exact enumeration).
    #[error("test undefined: {0}")]
    UndefinedTest(String),

    /// A decoder has too few samples for one of its classes.
    #[error("class starvation in {decoder} decoder: {detail}")]
    ClassStarvation { decoder: String, detail: String },

    /// State-machine misuse, e.g. a clock running backwards.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed file content.
    #[error("format error: {0}")]
    Format(String),

    /// Files written by incompatible format versions.
    #[error("format version mismatch: {0}")]
    Version(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable identifier used in machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NumericDomain(_) => "numeric_domain",
            Error::Shape { .. } => "shape",
            Error::Argument(_) => "argument",
            Error::Convergence { .. } => "convergence",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::NoReference(_) => "no_reference",
            Error::ConstraintInfeasible { .. } => "constraint_infeasible",
            Error::UndefinedAuc(_) => "undefined_auc",
            Error::UndefinedTest(_) => "undefined_test",
            Error::ClassStarvation { .. } => "class_starvation",
            Error::Protocol(_) => "protocol",
            Error::Format(_) => "format",
            Error::Version(_) => "version",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
