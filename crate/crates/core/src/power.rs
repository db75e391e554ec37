//! Power curves along the standardized-deviation parameterization, plus
//! the infeasible oracle GLS benchmark.
//!
//! Power functions of every test considered depend on the parameters only
//! through the scalar deviation `delta` and the covariance: the mean is
//! moved away from the null along the GLS direction so that the
//! standardized restriction discrepancy equals `delta`. The oracle
//! benchmark is the level-`alpha` F-test that knows the covariance; its
//! power at `delta` is a noncentral-F tail with noncentrality `delta^2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceCandidate;
use crate::model::TestingProblem;
use crate::qform;
use crate::rng::{stream_rng, Stream};
use crate::sizecontrol::SearchParams;
use crate::statistics::{evaluate, StatisticSpec};
use crate::{Error, Result};

/// A computed power curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerCurve {
    /// Statistic label (or "oracle").
    pub test: String,
    /// Critical value used (the oracle stores its F quantile here).
    pub c: f64,
    pub sigma: CovarianceCandidate,
    pub delta_grid: Vec<f64>,
    pub power: Vec<f64>,
}

/// The default grid: 61 points on [0, 6].
pub fn default_delta_grid() -> Vec<f64> {
    (0..61).map(|i| i as f64 * 0.1).collect()
}

/// Mean vector at standardized deviation `delta`: `X (beta0 + t w)` with
/// `w = (X' Sigma^{-1} X)^{-1} R'` the GLS direction and `t` scaled so the
/// restriction discrepancy over its GLS standard deviation equals `delta`.
fn mean_at_delta(
    problem: &TestingProblem,
    sigma: &CovarianceCandidate,
    delta: f64,
) -> Result<DVector<f64>> {
    let x = problem.x();
    let n = problem.n();
    let tau = sigma.tau_sq();
    // X' Sigma^{-1} X for diagonal Sigma.
    let mut xs = x.clone();
    for i in 0..n {
        let w = 1.0 / tau[i];
        for j in 0..x.ncols() {
            xs[(i, j)] *= w;
        }
    }
    let a_gls = x.transpose() * xs;
    let chol = a_gls
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("X' Sigma^{-1} X not positive definite".into()))?;
    let w_dir = chol.solve(&problem.r_matrix().transpose()); // k x q
    let s = problem.r_matrix() * &w_dir; // q x q
    if problem.q() == 1 {
        let s_val = s[(0, 0)];
        if !(s_val > 0.0) {
            return Err(Error::InvalidInput(
                "GLS variance of the restriction is not positive".into(),
            ));
        }
        let t = delta / s_val.sqrt();
        Ok(problem.mu0() + x * (w_dir.column(0) * t))
    } else {
        // Multi-restriction deviations move along the equally-weighted
        // direction of the GLS square root.
        let q = problem.q();
        let eig = nalgebra::SymmetricEigen::new(s.clone());
        let sqrt_s = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()))
            * eig.eigenvectors.transpose();
        let u = DVector::from_element(q, 1.0 / (q as f64).sqrt());
        let target = sqrt_s * u * delta; // desired R beta - r
        let t = chol.solve(&(problem.r_matrix().transpose() * &target));
        let coeff = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("singular GLS matrix".into()))?
            .solve(&target);
        let _ = t;
        Ok(problem.mu0() + x * (w_dir * coeff))
    }
}

/// Power curve of the test `{T >= c}` under covariance `sigma`, exact for
/// scalar restrictions, Monte Carlo otherwise. Power depends on `delta`
/// only through its absolute value.
pub fn power_curve(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    sigma: &CovarianceCandidate,
    delta_grid: &[f64],
    params: &SearchParams,
    seed: u64,
) -> Result<PowerCurve> {
    if sigma.n() != problem.n() {
        return Err(Error::DimensionMismatch(
            "covariance dimension does not match the problem".into(),
        ));
    }
    let mut power = Vec::with_capacity(delta_grid.len());
    if problem.q() == 1 {
        let rm = qform::reduction_matrix(problem, spec, c)?;
        for &delta in delta_grid {
            let mu = mean_at_delta(problem, sigma, delta.abs())?;
            let diff = &mu - problem.mu0();
            let s = sigma.sqrt_diag();
            let nu = DVector::from_fn(problem.n(), |i, _| diff[i] / s[i]);
            let nu_opt = if delta == 0.0 { None } else { Some(&nu) };
            let spectrum = qform::spectrum(&rm.a, sigma, nu_opt)?;
            power.push(qform::tail_prob_nonneg(
                &spectrum,
                params.acc_refined,
                params.integrand_budget,
            )?);
        }
    } else {
        let draws = params.mc_draws[2];
        let mut rng = stream_rng(seed, Stream::StageSample(6));
        let z = DMatrix::from_fn(problem.n(), draws, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let s = sigma.sqrt_diag();
        for &delta in delta_grid {
            let mu = mean_at_delta(problem, sigma, delta.abs())?;
            let mut hits = 0usize;
            let mut y = DVector::zeros(problem.n());
            for j in 0..draws {
                for i in 0..problem.n() {
                    y[i] = mu[i] + s[i] * z[(i, j)];
                }
                if evaluate(problem, spec, &y)?.value >= c {
                    hits += 1;
                }
            }
            power.push(hits as f64 / draws as f64);
        }
    }
    Ok(PowerCurve {
        test: spec.family.label().to_string(),
        c,
        sigma: sigma.clone(),
        delta_grid: delta_grid.to_vec(),
        power,
    })
}

/// The infeasible GLS oracle: a level-`alpha` F-test with known
/// covariance; its power at `delta` is the noncentral-F tail with
/// noncentrality `delta^2` at the central F quantile.
pub fn oracle_power_curve(
    problem: &TestingProblem,
    sigma: &CovarianceCandidate,
    alpha: f64,
    delta_grid: &[f64],
    params: &SearchParams,
) -> Result<PowerCurve> {
    if problem.q() != 1 {
        return Err(Error::NotScalarRestriction { q: problem.q() });
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must be in (0, 1)".into()));
    }
    let d2 = problem.n() - problem.k();
    let fq = qform::f_quantile(
        1,
        d2,
        1.0 - alpha,
        params.acc_refined,
        params.integrand_budget,
    )?;
    let mut power = Vec::with_capacity(delta_grid.len());
    for &delta in delta_grid {
        power.push(qform::noncentral_f_tail(
            1,
            d2,
            delta * delta,
            fq,
            params.acc_refined,
            params.integrand_budget,
        )?);
    }
    Ok(PowerCurve {
        test: "oracle".to_string(),
        c: fq,
        sigma: sigma.clone(),
        delta_grid: delta_grid.to_vec(),
        power,
    })
}
