use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix `{name}` is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { name: String, min_eig: f64 },

    #[error("matrix `{name}` must be strictly positive definite")]
    NotPositiveDefinite { name: String },

    #[error("matrix `{name}` is not symmetric (max asymmetry {asym:e})")]
    NotSymmetric { name: String, asym: f64 },

    #[error("innovation covariance is singular at step {step}")]
    SingularS { step: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("window too short: {0}")]
    WindowTooShort(String),

    #[error("FIR order {order} exceeds horizon T={horizon}")]
    OrderExceedsHorizon { order: usize, horizon: usize },

    #[error("budgets admit no nonzero attack: {0}")]
    InfeasibleBudgets(String),
}
