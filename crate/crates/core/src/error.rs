use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e}")]
    SymmetryViolation { asymmetry: f64 },

    #[error("matrix is not positive semi-definite: smallest eigenvalue {min_eigenvalue:.3e} (largest {max_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("matrix is not positive definite: smallest eigenvalue {min_eigenvalue:.3e} (largest {max_eigenvalue:.3e})")]
    NotPd { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("invalid subspace basis: {0}")]
    Basis(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("asset {asset} has zero flow volatility")]
    DegenerateLiquidity { asset: usize },

    #[error("asset {asset} has zero price volatility and the model is not fragmentation invariant")]
    ZeroVolatility { asset: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid weight matrix: {0}")]
    InvalidWeight(String),

    #[error("R2 denominator is zero")]
    DegenerateDenominator,

    #[error("events out of order: {0}")]
    Ordering(String),

    #[error("no events inside the session window for day {0}")]
    EmptySession(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown asset: {0}")]
    UnknownAsset(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
