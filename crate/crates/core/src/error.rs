use thiserror::Error;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The model is not well posed for the given data, e.g. a non-positive
    /// `c_i` coefficient in the joint model.
    #[error("model degenerate at detector(s) {detectors:?}: {reason}")]
    ModelDegenerate {
        detectors: Vec<usize>,
        reason: String,
    },

    /// Least-squares models need strictly positive data; `cells` lists
    /// offending (detector, column) pairs, truncated to the first few.
    #[error("{count} non-positive cell(s) in {what}, first {cells:?}")]
    PositivityViolation {
        what: String,
        count: usize,
        cells: Vec<(usize, usize)>,
    },

    #[error("objective became non-finite at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        snapshot: Vec<f64>,
    },

    #[error("descent violated at iteration {iteration}: {before} -> {after}")]
    DescentViolation {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn mismatch<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::DimensionMismatch(msg.into()))
}
