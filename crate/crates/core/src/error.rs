use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("data matrix is identically zero")]
    ZeroData,

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("no stable eigenpairs available")]
    NoStableEigenpairs,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("basis element {index} has no invariance interval")]
    NoInvarianceInterval { index: usize },

    #[error("linear program breakdown: {0}")]
    LpBreakdown(String),

    #[error("polytope is empty")]
    EmptyPolytope,

    #[error("no feasible start found after {attempts} samples")]
    NoFeasibleStart { attempts: usize },

    #[error("feasible domain contains no grid points")]
    EmptyDomain,

    #[error("rejection sampling failed after {draws} draws")]
    SamplingFailed { draws: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
