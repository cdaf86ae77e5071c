use thiserror::Error;

/// Errors raised anywhere in the multiscale pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh exponents must satisfy coarse <= eps <= fine, got ({coarse}, {eps}, {fine})")]
    NonNestedMesh { coarse: u32, eps: u32, fine: u32 },

    #[error("invalid coefficient range [{lo}, {hi}]: need 0 < lo <= hi")]
    InvalidCoefficientRange { lo: f64, hi: f64 },

    #[error("fine mesh too coarse: {fine_per_coarse} fine cells per coarse edge, degree {degree} needs at least {required}")]
    MeshTooCoarse {
        fine_per_coarse: usize,
        degree: usize,
        required: usize,
    },

    #[error("point ({x}, {y}) lies outside element {element}")]
    PointOutsideElement { element: usize, x: f64, y: f64 },

    #[error("matrix is not positive definite (pivot {index})")]
    NotPositiveDefinite { index: usize },

    #[error("constraint rows are rank deficient ({rows} rows, {dofs} primal dofs)")]
    RankDeficient { rows: usize, dofs: usize },

    #[error("indefinite factorization broke down: {0}")]
    FactorizationBreakdown(String),

    #[error("linear solve stalled at relative residual {residual:e} (tolerance {tolerance:e})")]
    ToleranceNotReached { residual: f64, tolerance: f64 },

    #[error("column ({element}, {mode}) violates the moment identity, residual {residual:e}")]
    MomentIdentity {
        element: usize,
        mode: usize,
        residual: f64,
    },

    #[error("energy grew by a factor {ratio:e} at step {step}")]
    Diverged { step: usize, ratio: f64 },

    #[error("power iteration did not converge within {0} steps")]
    PowerIteration(usize),

    #[error("fourth-order initial step needs the first two time derivatives of the source")]
    MissingSourceDerivatives,

    #[error("invalid theta scheme setup: {0}")]
    InvalidScheme(String),

    #[error("errors must be positive, got {0}")]
    NonPositiveError(f64),

    #[error("config: {0}")]
    Config(String),

    #[error("basis cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
