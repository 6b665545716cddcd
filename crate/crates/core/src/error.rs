//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("location ({location}) matches no grid cell within {tol} degrees")]
    UnmatchedLocation { location: String, tol: f64 },

    #[error("operation would leave an empty domain: {0}")]
    EmptyDomain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("inventory cells with non-positive flux or area: ids {0:?}")]
    NonpositiveFlux(Vec<u64>),

    #[error("variogram fit diverged: no start produced a finite optimum")]
    FitDiverged,

    #[error("lognormal moments overflow: log-scale mean plus half variance exceeds {0}")]
    MomentOverflow(f64),

    #[error("matrix factorization failed even after jitter of {max_jitter:.3e}")]
    FactorizationFailed { max_jitter: f64 },

    #[error("flux prior already holds totals per cell")]
    AlreadyTotal,

    #[error("covariance factor is singular or not positive definite")]
    SingularFactor,

    #[error("mode search failed to converge: last gradient max-norm {grad_norm:.3e}")]
    ModeSearchFailed { grad_norm: f64 },

    #[error("log-density Hessian is not negative definite at the mode")]
    NonConcaveAtMode,

    #[error("EM monotonicity violated at iteration {iter}: Q fell from {from} to {to}")]
    EmMonotonicity { iter: usize, from: f64, to: f64 },

    #[error("posterior variance is zero; score undefined")]
    ZeroVariance,

    #[error("region mask length {got} does not match chain dimension {expected}")]
    MaskMismatch { expected: usize, got: usize },

    #[error("initial point outside the target support: {0}")]
    DomainError(String),

    #[error("time-varying observation pattern is unsupported at dimension {0}")]
    ScaleLimit(usize),

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the command-line front end maps this error to:
    /// 2 for usage or configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnmatchedLocation { .. }
            | Error::EmptyDomain(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidParams(_)
            | Error::NonpositiveFlux(_)
            | Error::AlreadyTotal
            | Error::MaskMismatch { .. }
            | Error::DomainError(_)
            | Error::ScaleLimit(_)
            | Error::Format { .. }
            | Error::Io(_) => 2,
            Error::FitDiverged
            | Error::MomentOverflow(_)
            | Error::FactorizationFailed { .. }
            | Error::SingularFactor
            | Error::ModeSearchFailed { .. }
            | Error::NonConcaveAtMode
            | Error::EmMonotonicity { .. }
            | Error::ZeroVariance => 3,
        }
    }
}
