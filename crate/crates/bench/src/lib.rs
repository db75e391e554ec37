//! Shared fixtures for the benchmarks.

use nalgebra::DVector;

use hrt_core::model::{two_group_problem, TestingProblem};
use hrt_core::{CovarianceCandidate, StatisticFamily, StatisticSpec};

/// The two-group comparison problem used throughout the benchmarks.
pub fn bench_problem() -> TestingProblem {
    two_group_problem(30, 3).expect("valid fixture")
}

pub fn bench_spec(problem: &TestingProblem) -> StatisticSpec {
    StatisticSpec::new(problem, StatisticFamily::Hc2)
}

/// A mildly heteroskedastic covariance candidate.
pub fn bench_sigma(n: usize) -> CovarianceCandidate {
    CovarianceCandidate::from_unnormalized(DVector::from_fn(n, |i, _| 0.5 + (i % 7) as f64))
        .expect("valid diagonal")
}
