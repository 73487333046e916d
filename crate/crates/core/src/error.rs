use thiserror::Error;

/// Errors raised while building or solving a discrete control problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of range: {0}")]
    ParameterDomain(String),

    #[error("mesh has no intervals")]
    EmptyMesh,

    #[error("weight exponent {0} is not integrable at y = 0 (need alpha > -1)")]
    NonIntegrableWeight(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data function returned a non-finite value at {0}")]
    Data(String),

    #[error("order gamma = {0} is handled by the first-order difference, not the L1 weights")]
    UseDelta1(f64),

    #[error("discrete derivative needs a non-empty history")]
    EmptyHistory,

    #[error("invalid bounds: lower {lower} > upper {upper}")]
    Bounds { lower: f64, upper: f64 },

    #[error("linear solver failure: {0}")]
    Solver(String),

    #[error("data has no separable spectral form")]
    UnsupportedData,

    #[error("rate fit needs positive values: {0}")]
    NonPositive(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
