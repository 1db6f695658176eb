use thiserror::Error;

pub type Result<T> = std::result::Result<T, DoaError>;

#[derive(Debug, Error)]
pub enum DoaError {
    /// An argument violates a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value showed up inside an iterative solver.
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    /// Hermitian positive-definite factorization failed.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Root-MUSIC found fewer admissible roots than requested sources.
    #[error("root-MUSIC found {found} admissible roots, {needed} required")]
    RootDeficit { found: usize, needed: usize },

    #[error("covariance is singular at diagonal load {load:e}; increase the diagonal load")]
    SingularCovariance { load: f64 },

    /// One or more sub-band solves failed; entries are (band center in degrees, message).
    #[error("{} sub-band solve(s) failed, first at {:.4} deg: {}", .0.len(), .0[0].0, .0[0].1)]
    SubBands(Vec<(f64, String)>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DoaError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        DoaError::Domain(msg.into())
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            DoaError::Domain(_) | DoaError::Config(_) | DoaError::Json(_)
        )
    }

    /// True for failures inside the numerical kernels.
    pub fn is_numerical_error(&self) -> bool {
        matches!(
            self,
            DoaError::Numerical { .. }
                | DoaError::Factorization(_)
                | DoaError::RootDeficit { .. }
                | DoaError::SingularCovariance { .. }
                | DoaError::SubBands(_)
        )
    }
}
