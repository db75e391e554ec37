use crate::sizecontrol::CriticalValueReport;

/// Errors surfaced by the library.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("{what} is rank deficient: numerical rank {rank}, expected {expected}")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        expected: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operation requires a scalar restriction, got q = {q}")]
    NotScalarRestriction { q: usize },

    #[error("reduction matrix vanishes at c = {c}: statistic is constant off its exceptional set")]
    DegenerateReduction { c: f64 },

    #[error(
        "tail probability accuracy {requested:e} not reached (error bound {achieved:e}); \
         best estimate {estimate}"
    )]
    AccuracyNotReached {
        estimate: f64,
        achieved: f64,
        requested: f64,
    },

    #[error("assumption on (X, R) violated: {0}")]
    AssumptionViolated(String),

    #[error("infeasible covariance model: {0}")]
    InfeasibleModel(String),

    #[error(
        "critical-value search did not converge after {} iterations \
         (best c = {}, size {})",
        report.iterations, report.c, report.final_size
    )]
    NotConverged { report: CriticalValueReport },

    #[error("feasibility check refused: {0}")]
    FeasibilityRefused(String),

    #[error("bootstrap variant H requires a covariance-estimator plugin")]
    PluginMissing,
}

impl Error {
    /// Best available estimate carried by an accuracy failure, if any.
    pub fn partial_estimate(&self) -> Option<f64> {
        match self {
            Error::AccuracyNotReached { estimate, .. } => Some(*estimate),
            _ => None,
        }
    }
}
