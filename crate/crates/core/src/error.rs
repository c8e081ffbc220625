use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("matrix is not symmetric (asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("point is off the manifold: ‖XᵀX − N·I‖_F = {defect:e} exceeds {tol:e}")]
    OffManifold { defect: f64, tol: f64 },

    #[error("retraction failed: {0}")]
    Retraction(String),

    #[error("noise tensor needs {entries} entries, budget is {budget}")]
    Budget { entries: u128, budget: u64 },

    #[error("domain error: {reason}")]
    Domain { reason: String, blow_up_time: Option<f64> },

    #[error("ambiguous greedy selection: |{first}| and |{second}| tie within tolerance")]
    AmbiguousSelection { first: f64, second: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("correlation reduction broke down at t = {t}: largest singular value {sigma_max}")]
    ReductionBreakdown { t: f64, sigma_max: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn domain(reason: impl Into<String>) -> Self {
        Error::Domain {
            reason: reason.into(),
            blow_up_time: None,
        }
    }
}
