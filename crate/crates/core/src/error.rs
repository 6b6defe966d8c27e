use thiserror::Error;

/// Errors produced by the controllers, solvers and scenario tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("point lies outside the set by {distance:e} (tolerance {tolerance:e})")]
    NotInSet { distance: f64, tolerance: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite environment output at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error(
        "integrator diverged at t = {t} (|state| = {magnitude:e}); \
         try a smaller step or a smaller epsilon*h product"
    )]
    Divergence { t: f64, magnitude: f64 },

    #[error("environment is not viable on the grid (best residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error(
        "viability check inconclusive after {iterations} iterations (residual {residual:e}); \
         increase the iteration cap or refine the grid"
    )]
    Inconclusive { iterations: usize, residual: f64 },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty trajectory log")]
    EmptyLog,

    #[error("no results in {0}")]
    NoResults(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected,
            got,
            context,
        })
    }
}
