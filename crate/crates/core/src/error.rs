use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("field has nonzero boundary value {value:e} at node {node}")]
    NonZeroTrace { node: usize, value: f64 },

    #[error("coefficient {value} at node {node} is below the floor {floor}")]
    BelowFloor { node: usize, value: f64, floor: f64 },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("point {point:?} lies outside the closed unit domain")]
    OutsideDomain { point: Vec<f64> },

    #[error("linear solver did not converge: {iterations} iterations, relative residual {residual:e}")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("operator is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("line search failed on every restart (best trace length {})", trace.len())]
    LineSearchFailed { trace: Vec<f64> },

    #[error("all {n_paths} Monte Carlo paths were censored")]
    AllCensored { n_paths: usize },

    #[error("{failed} of {total} replications failed (first: {first})")]
    CampaignFailed {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
