use thiserror::Error;

use crate::l0::L0GeodesicResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the flow horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("invalid time window: t' = {t_prime} must be < t'' = {t_dprime}")]
    InvalidWindow { t_prime: f64, t_dprime: f64 },

    #[error("tangent vectors are based at different points")]
    BaseMismatch,

    #[error("point is not on the model manifold: {0}")]
    NotOnManifold(String),

    #[error("vector is not tangent at its base point (defect {0:e})")]
    NotTangent(f64),

    #[error("invalid flow: {0}")]
    InvalidFlow(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("grid needs at least 8 intervals, got {0}")]
    GridTooCoarse(usize),

    #[error("L0 solve did not converge (residual {residual:e})")]
    NonConvergence {
        residual: f64,
        best: Box<L0GeodesicResult>,
    },

    #[error("endpoints have more than one minimizing L0-geodesic")]
    MultipleMinimizers,

    #[error("geodesic was not converged")]
    Unconverged,

    #[error("finite-difference stencil leaves the valid window: {0}")]
    StencilOutOfWindow(String),

    #[error("cost matrix entry ({row}, {col}) failed: {source}")]
    CostEntry {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} trajectories aborted; first: path {first_path}: {first_error}")]
    Ensemble {
        failed: usize,
        total: usize,
        first_path: usize,
        first_error: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
