//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- sparse matrix / factorization ---
    #[error("matrix index ({row}, {col}) out of range for dimension {dim}")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not positive definite: pivot {pivot} is non-positive after jitter")]
    NotPositiveDefinite { pivot: usize },

    // --- priors / graph ---
    #[error("unit {unit} has no neighbors; the intrinsic CAR prior is undefined for isolated units")]
    IsolatedUnit { unit: usize },
    #[error("random walk prior needs at least 3 levels, got {m}")]
    TooFewLevels { m: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("adjacency graph error: {0}")]
    Graph(String),

    // --- model specification ---
    #[error("model specification error: {0}")]
    Spec(String),

    // --- inla engine ---
    #[error("Newton iteration for the Gaussian approximation did not converge after {iters} iterations (last step {last_step:.3e})")]
    NewtonDivergence { iters: usize, last_step: f64 },
    #[error("hyperparameter mode search did not converge; best log-posterior {best_value:.6} at {best_point:?}")]
    ModeSearchFailure { best_point: Vec<f64>, best_value: f64 },
    #[error("negative Hessian at the hyperparameter mode is not positive definite; the model is likely unidentified")]
    NonConcaveMode,
    #[error("hyperparameter marginal unavailable: {0}")]
    MarginalUnavailable(String),
    #[error("Laplace marginal failed for latent index {index}: only {surviving} grid points survived")]
    LaplaceGridFailure { index: usize, surviving: usize },

    // --- oracles ---
    #[error("quadrature grid too large: {cells} cells exceeds the {limit} guard")]
    OracleTooLarge { cells: u128, limit: u128 },
    #[error("sampler diagnostics failed: split R-hat {rhat:.4} exceeds 1.05; pass force=true to override")]
    McmcNotConverged { rhat: f64 },
    #[error("invalid sampler configuration: {0}")]
    McmcConfig(String),

    // --- io / ingestion ---
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Config(#[from] serde_json::Error),
}
