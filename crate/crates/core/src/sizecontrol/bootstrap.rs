//! Parametric-bootstrap baselines.
//!
//! These procedures plug an estimate of the covariance diagonal into the
//! exact quadratic-form kernel and read off a data-dependent critical
//! value: variant `C` estimates the diagonal by the statistic's own
//! weighted squared OLS residuals, `C3` always uses the HC3 weights, and
//! `H` delegates to a caller-supplied estimator. They carry no size
//! guarantee; the point of implementing them is to measure their null
//! rejection rates against the worst-case approach.

use nalgebra::DVector;
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceCandidate;
use crate::model::TestingProblem;
use crate::qform;
use crate::rng::{derive_seed, Stream};
use crate::statistics::{evaluate, StatisticFamily, StatisticSpec};
use crate::{Error, Result};

use super::SearchParams;

/// Which covariance estimate feeds the bootstrap critical value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapVariant {
    /// The statistic's own weights on squared OLS residuals.
    C,
    /// HC3 weights on squared OLS residuals regardless of the statistic.
    C3,
    /// Caller-supplied estimator.
    H,
}

/// Caller-supplied covariance-diagonal estimator for variant `H`
/// (unnormalized; the harness normalizes to unit trace).
pub type SigmaEstimator<'a> =
    &'a (dyn Fn(&TestingProblem, &StatisticSpec, &DVector<f64>) -> Result<DVector<f64>> + Sync);

/// Decision of a single bootstrap test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapDecision {
    pub reject: bool,
    pub statistic: f64,
    pub critical_value: f64,
}

fn estimated_sigma(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    variant: BootstrapVariant,
    estimator: Option<SigmaEstimator<'_>>,
    y: &DVector<f64>,
) -> Result<CovarianceCandidate> {
    let raw = match variant {
        BootstrapVariant::C => weighted_residual_diag(problem, &spec.weights, y)?,
        BootstrapVariant::C3 => {
            let hc3 = StatisticSpec::new(problem, StatisticFamily::Hc3);
            weighted_residual_diag(problem, &hc3.weights, y)?
        }
        BootstrapVariant::H => {
            let est = estimator.ok_or(Error::PluginMissing)?;
            est(problem, spec, y)?
        }
    };
    let max = raw.iter().cloned().fold(0.0_f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidInput(
            "estimated covariance diagonal is zero (data in span(X))".into(),
        ));
    }
    // Entries can vanish exactly (zero residuals); floor them so the
    // estimate stays a valid covariance candidate.
    let floored = DVector::from_iterator(raw.len(), raw.iter().map(|&v| v.max(1e-12 * max)));
    CovarianceCandidate::from_unnormalized(floored)
}

fn weighted_residual_diag(
    problem: &TestingProblem,
    weights: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (u_hat, _) = problem.residuals(y)?;
    Ok(DVector::from_iterator(
        u_hat.len(),
        u_hat
            .iter()
            .zip(weights.iter())
            .map(|(&u, &w)| w * u * u),
    ))
}

/// `(1-alpha)`-quantile of the statistic under the estimated covariance,
/// by bisection on the exact kernel.
fn bootstrap_critical_value(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    sigma_hat: &CovarianceCandidate,
    alpha: f64,
    params: &SearchParams,
) -> Result<f64> {
    let prob = |c: f64| -> Result<f64> {
        let rm = qform::reduction_matrix(problem, spec, c)?;
        let spectrum = qform::spectrum(&rm.a, sigma_hat, None)?;
        qform::tail_prob_nonneg(&spectrum, params.acc, params.integrand_budget)
    };
    let mut hi = 1.0;
    let mut guard = 0;
    while prob(hi)? > alpha {
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(Error::InvalidInput(
                "bootstrap quantile bracketing failed".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if prob(mid)? > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-6 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Run the bootstrap test once on observed data (`q = 1` only).
pub fn bootstrap_reject(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    y_obs: &DVector<f64>,
    variant: BootstrapVariant,
    alpha: f64,
    estimator: Option<SigmaEstimator<'_>>,
    params: &SearchParams,
) -> Result<BootstrapDecision> {
    if problem.q() != 1 {
        return Err(Error::NotScalarRestriction { q: problem.q() });
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must be in (0, 1)".into()));
    }
    let sigma_hat = estimated_sigma(problem, spec, variant, estimator, y_obs)?;
    let critical_value = bootstrap_critical_value(problem, spec, &sigma_hat, alpha, params)?;
    let statistic = evaluate(problem, spec, y_obs)?.value;
    Ok(BootstrapDecision {
        reject: statistic >= critical_value,
        statistic,
        critical_value,
    })
}

/// Null rejection probability of the bootstrap test under a true
/// covariance `sigma`, estimated over `reps` simulated datasets.
///
/// The decision per dataset is taken in p-value form: rejecting when the
/// tail probability of the observed statistic under the estimated
/// covariance is at most `alpha` selects exactly the same datasets as
/// comparing the statistic to the bisection quantile, at one kernel call
/// per dataset.
pub fn bootstrap_null_rejection(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    variant: BootstrapVariant,
    sigma: &CovarianceCandidate,
    alpha: f64,
    reps: usize,
    seed: u64,
    estimator: Option<SigmaEstimator<'_>>,
    params: &SearchParams,
) -> Result<f64> {
    if problem.q() != 1 {
        return Err(Error::NotScalarRestriction { q: problem.q() });
    }
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    let n = problem.n();
    let s = sigma.sqrt_diag();
    let rejections: Result<usize> = (0..reps)
        .into_par_iter()
        .map(|r| -> Result<usize> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                Stream::Bootstrap(r as u64),
            ));
            let mut y = problem.mu0().clone();
            for i in 0..n {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                y[i] += s[i] * z;
            }
            let sigma_hat = estimated_sigma(problem, spec, variant, estimator, &y)?;
            let t_obs = evaluate(problem, spec, &y)?.value;
            if t_obs <= 0.0 {
                return Ok(0);
            }
            let rm = qform::reduction_matrix(problem, spec, t_obs)?;
            let spectrum = qform::spectrum(&rm.a, &sigma_hat, None)?;
            let p = qform::tail_prob_nonneg(&spectrum, params.acc, params.integrand_budget)?;
            Ok(usize::from(p <= alpha))
        })
        .sum();
    Ok(rejections? as f64 / reps as f64)
}
