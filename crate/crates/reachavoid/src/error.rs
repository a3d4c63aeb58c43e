//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("unbounded deterministic constraint set: {0}")]
    UnboundedConstraintSet(String),

    #[error("over-tightened constraint {index}: offset {offset} leaves the set empty")]
    OverTightened { index: usize, offset: f64 },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(
        "MPC infeasible at block {k}, step {j}: primal residual {primal_residual:.3e}, \
         dual residual {dual_residual:.3e}"
    )]
    MpcInfeasible {
        k: usize,
        j: usize,
        state: Vec<f64>,
        primal_residual: f64,
        dual_residual: f64,
    },

    #[error("terminal set validation failed at vertex {vertex}: {reason}")]
    TerminalValidation { vertex: usize, reason: String },

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("certificate-mode violation: {0}")]
    CertificateViolation(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn dim(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::DimMismatch {
            expected,
            got,
            context: context.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
