//! Valid heteroskedasticity-robust testing in the Gaussian linear model.
//!
//! This crate computes worst-case sizes, smallest size-controlling critical
//! values, maximal p-values, and power curves for the classical F-test and
//! its heteroskedasticity-robust variants (HC0-HC4 and HC0R-HC4R weights,
//! based on unrestricted or restricted least-squares residuals). The null
//! hypothesis is an affine restriction `R beta = r` in the fixed-design
//! Gaussian regression `y ~ N(X beta, sigma^2 Sigma)`, where `Sigma` ranges
//! over a user-chosen set of positive diagonal covariance matrices with unit
//! trace.
//!
//! The pieces fit together as follows:
//!
//! * [`model`] holds the testing problem and all derived linear-algebra
//!   objects (projectors, leverages, residual maps, index sets).
//! * [`statistics`] evaluates the twelve test statistics with their
//!   singularity conventions.
//! * [`feasibility`] decides, before any optimization, whether size control
//!   is possible, and computes the lower bound `C*` that every
//!   size-controlling critical value must exceed.
//! * [`qform`] is the exact-probability kernel for scalar restrictions:
//!   rejection events reduce to `{z' A z >= 0}` for a symmetric matrix `A`,
//!   and the tail probability of the resulting weighted sum of noncentral
//!   chi-squares is computed by numerical characteristic-function inversion.
//! * [`sizecontrol`] runs the multi-stage searches over the covariance set:
//!   worst-case size for a given critical value, smallest size-controlling
//!   critical values (line search and quantile variants), maximal p-values,
//!   and the parametric-bootstrap baselines.
//! * [`power`] computes power curves along the standardized-deviation
//!   parameterization plus the infeasible oracle GLS benchmark.
//! * [`search`] looks for hostile regressor vectors that expose invalidity
//!   of conventional critical values.

pub mod covariance;
pub mod error;
pub mod feasibility;
pub mod model;
pub mod optim;
pub mod power;
pub mod qform;
pub mod rng;
pub mod search;
pub mod sizecontrol;
pub mod statistics;

pub use covariance::{CovarianceCandidate, CovarianceModel};
pub use error::Error;
pub use feasibility::{FeasibilityReport, Verdict};
pub use model::TestingProblem;
pub use qform::{QuadraticFormSpectrum, ReductionMatrix};
pub use sizecontrol::{
    CriticalValueReport, Method, SearchParams, SizeReport,
};
pub use statistics::{StatisticFamily, StatisticSpec, StatisticValue};

/// Relative singular-value / eigenvalue threshold used by every rank,
/// membership, and covariance-singularity test in the crate.
pub const RANK_TOL: f64 = 1e-8;

/// The 95% quantile of a chi-square distribution with one degree of
/// freedom, the conventional critical value for the robust statistics.
pub const CHI2_1_Q95: f64 = 3.841458820694124;

pub type Result<T> = std::result::Result<T, Error>;
