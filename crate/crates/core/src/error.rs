use thiserror::Error;

/// Errors raised by the laboratory's operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {point:?} lies outside the sampled grid hull")]
    OutOfHull { point: Vec<f64> },

    #[error("compact set does not intersect the sampling grid")]
    EmptyIntersection,

    #[error("test field is not integrable against the declared envelope: {0}")]
    EnvelopeViolation(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("characteristic function does not decay on the dual grid (|mu_hat| = {edge:e} at the edge); {suggestion}")]
    InsufficientDecay { edge: f64, suggestion: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("CFL condition violated: sigma^2 dt / h^2 = {ratio} > {limit}")]
    Cfl { ratio: f64, limit: f64 },

    #[error("resolvent parameter {lambda} does not exceed the declared growth rate {rate}")]
    BelowGrowth { lambda: f64, rate: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("spectral measure is not Hermitian symmetric: {0}")]
    NotHermitian(String),

    #[error("suite validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
