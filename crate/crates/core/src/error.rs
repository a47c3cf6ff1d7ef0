use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(
        "root bracket not found after {doublings} doublings: \
         R({lo})={r_lo}, R({hi})={r_hi}"
    )]
    Bracket {
        doublings: usize,
        lo: f64,
        hi: f64,
        r_lo: f64,
        r_hi: f64,
    },

    #[error("calibration did not converge after {iterations} iterations, residuals {residuals:?}")]
    Calibration {
        iterations: usize,
        residuals: [f64; 3],
    },

    #[error("simulation failed for firm {firm} in period {period}: {source}")]
    Simulation {
        firm: usize,
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("standardization error: variable `{0}` has zero variance")]
    Standardization(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite moment at row {row} (firm {firm}, period {period})")]
    NonFiniteMoment {
        row: usize,
        firm: usize,
        period: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
