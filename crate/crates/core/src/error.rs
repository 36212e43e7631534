use thiserror::Error;

/// Errors raised by the numerical core.
///
/// The variants split into two families: bad input (`InvalidParameter`,
/// `DimensionMismatch`, `OffLattice`, ...) and numerical trouble detected
/// while running (`NonFinite`, `InvariantViolation`, `StepTooLarge`, ...).
/// [`Error::is_numerical`] tells them apart.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("position off lattice: {0}")]
    OffLattice(String),

    #[error("negative occupation {value} at cell {cell}")]
    NegativeOccupation { cell: usize, value: f64 },

    #[error("operator is not Hermitian: {0}")]
    NonHermitian(String),

    #[error("noise measure inconsistent: {0}")]
    MeasureInconsistent(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("weak-field condition violated: |phi| = {phi} at cell {cell}")]
    WeakField { cell: usize, phi: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("step too large: local error estimate {estimate:e} exceeds {tolerance:e}")]
    StepTooLarge { estimate: f64, tolerance: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("no convergence: {0}")]
    NonConvergence(String),
}

impl Error {
    /// True for failures detected during a computation rather than in its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::StepTooLarge { .. } | Error::InvariantViolation(_) | Error::NonConvergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
