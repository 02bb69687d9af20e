use thiserror::Error;

/// Errors produced by estimation, inference and simulation routines.
#[derive(Debug, Error)]
pub enum EsError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidQuantileLevel(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("column `{0}` has zero variance and cannot be standardized")]
    DegenerateColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design restricted to {0} columns is rank deficient")]
    RankDeficient(usize),

    #[error("projection residual is orthogonal to the target column {0}")]
    DegenerateProjection(usize),

    #[error("variance estimate is not positive: {0}")]
    DegenerateVariance(String),

    #[error(
        "refitted cross-validation needs |S2| > s_m + s_q + s_e (|S2| = {half}, selected = {selected}); \
         use a larger sample or stronger penalties"
    )]
    RcvCardinality { half: usize, selected: usize },

    #[error("no lambda on the path satisfies the support cap {0}")]
    SupportCapExceeded(usize),

    #[error("cross-validation failed: {0}")]
    CrossValidation(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("input error at line {line}, column {column}: {message}")]
    Input {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EsError> = std::result::Result<T, E>;
