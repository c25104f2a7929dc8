use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid size {0}: must be at least 1")]
    InvalidSize(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("conductivity must be strictly positive (pixel {pixel} has {value})")]
    NonPositiveConductivity { pixel: usize, value: f64 },

    #[error("linear system is singular or not positive definite")]
    SingularSystem,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid mismatch: fine grid {fine} is not a multiple of coarse grid {coarse}")]
    GridMismatch { fine: usize, coarse: usize },

    #[error("non-positive input {0} to the inverse positivity transform")]
    NonPositiveInput(f64),

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("constraint matrix is ill-conditioned (Cholesky of the {0}x{0} capacitance failed)")]
    IllConditioned(usize),

    #[error("too many constraints: {got} exceeds the cap of {cap}")]
    TooManyConstraints { got: usize, cap: usize },

    #[error("quadratic objective increased from {before} to {after} during a sweep")]
    Divergence { before: f64, after: f64 },

    #[error("non-finite ELBO at iteration {iteration}: {diagnostic}")]
    NonFiniteLoss { iteration: usize, diagnostic: String },

    #[error("validation set is degenerate (zero output variance)")]
    DegenerateValidation,

    #[error("at least one dataset must be non-empty")]
    EmptyData,

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
