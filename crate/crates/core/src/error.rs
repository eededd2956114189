use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("points are too close to the cut locus (distance {distance})")]
    CutLocus { distance: f64 },

    #[error("{what} = {value} is out of range ({constraint})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("test underpowered: {n} samples per side, need at least {min}")]
    Underpowered { n: usize, min: usize },

    #[error("cell {cell} has expected count {expected} < 5")]
    Binning { cell: usize, expected: f64 },

    #[error("grid resolution error: {0}")]
    Resolution(String),

    #[error("evaluation on the boundary rho = {rho}")]
    Boundary { rho: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn out_of_range(what: &'static str, value: f64, constraint: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            value,
            constraint: constraint.into(),
        }
    }

    /// True for failures caused by floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Resolution(_))
    }
}
