//! Hostile-design search.
//!
//! Looks for a regressor vector (alongside an intercept, testing the slope)
//! that maximizes the lower bound `C*` for size-controlling critical
//! values. Designs found this way expose the invalidity of conventional
//! critical values: whenever `C*` exceeds the chi-square quantile, the
//! conventional test has size one. Each restart draws a starting vector
//! with log-standard-normal coordinates and runs a short simplex search;
//! a restart ending above the early-stop threshold terminates the sweep.

use nalgebra::DVector;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceModel;
use crate::feasibility;
use crate::model::{intercept_slope_problem, TestingProblem};
use crate::optim::{self, NelderMeadOptions};
use crate::qform;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sizecontrol::{self, SearchParams};
use crate::statistics::{StatisticFamily, StatisticSpec};
use crate::{Result, CHI2_1_Q95};

/// Tuning for the hostile search.
#[derive(Debug, Clone)]
pub struct HostileOptions {
    pub restarts: usize,
    /// Simplex iterations per restart.
    pub nm_max_iter: usize,
    /// Stop the restart sweep once the objective exceeds this value.
    pub early_stop: f64,
    /// Budgets for the size evaluations at the conventional critical
    /// values.
    pub params: SearchParams,
}

impl Default for HostileOptions {
    fn default() -> Self {
        HostileOptions {
            restarts: 5,
            nm_max_iter: 50,
            early_stop: 4.0,
            params: SearchParams::default(),
        }
    }
}

/// Worst-case sizes of the found design at the conventional critical
/// values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizesAtConventional {
    /// At the 95% chi-square(1) quantile.
    pub chi2_quantile: f64,
    /// At the 95% F(1, n-k) quantile.
    pub f_quantile: f64,
}

/// Result of a hostile search for one statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HostileResult {
    /// The found regressor (the design is an intercept plus this vector).
    pub x: DVector<f64>,
    pub c_star: f64,
    pub sizes_at_conventional: SizesAtConventional,
}

/// The search objective: `C*` of the intercept-plus-regressor design, or
/// zero when the design is invalid or the statistic's rank assumption
/// fails.
fn objective(family: StatisticFamily, xvec: &[f64]) -> f64 {
    let x2 = DVector::from_column_slice(xvec);
    let problem = match intercept_slope_problem(&x2) {
        Ok(p) => p,
        Err(_) => return 0.0,
    };
    let spec = StatisticSpec::new(&problem, family);
    if !feasibility::check_assumption(&problem, &spec) {
        return 0.0;
    }
    feasibility::c_star(&problem, &spec).unwrap_or(0.0)
}

/// Search for a hostile design of sample size `n` for one statistic, then
/// measure the worst-case size of the conventional tests on it.
pub fn hostile_search(
    n: usize,
    family: StatisticFamily,
    alpha: f64,
    seed: u64,
    options: &HostileOptions,
) -> Result<HostileResult> {
    let mut best_x: Option<Vec<f64>> = None;
    let mut best_f = f64::NEG_INFINITY;
    for r in 0..options.restarts.max(1) {
        let mut rng = stream_rng(seed, Stream::Restart(r as u64));
        let x0: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z.exp()
            })
            .collect();
        let opts = NelderMeadOptions {
            rel_tol: 1e-8,
            max_iter: options.nm_max_iter,
            init_step: 0.5,
        };
        let mut f = |x: &[f64]| objective(family, x);
        let (x, value) = optim::maximize(&mut f, &x0, &opts);
        if value > best_f {
            best_f = value;
            best_x = Some(x);
        }
        if best_f > options.early_stop {
            break;
        }
    }
    let x2 = DVector::from_vec(best_x.expect("at least one restart"));
    let problem = intercept_slope_problem(&x2)?;
    let spec = StatisticSpec::new(&problem, family);
    let c_star = feasibility::c_star(&problem, &spec)?;

    let f_crit = qform::f_quantile(
        1,
        n - 2,
        0.95,
        options.params.acc_refined,
        options.params.integrand_budget,
    )?;
    let size_chi2 = size_at(&problem, &spec, CHI2_1_Q95, &options.params, seed, 0)?;
    let size_f = size_at(&problem, &spec, f_crit, &options.params, seed, 1)?;
    let _ = alpha;
    Ok(HostileResult {
        x: x2,
        c_star,
        sizes_at_conventional: SizesAtConventional {
            chi2_quantile: size_chi2,
            f_quantile: size_f,
        },
    })
}

fn size_at(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    params: &SearchParams,
    seed: u64,
    which: u64,
) -> Result<f64> {
    let report = sizecontrol::size(
        problem,
        spec,
        c,
        &CovarianceModel::HetFull,
        params,
        derive_seed(seed, Stream::HostileDraw(which)),
    )?;
    Ok(report.size)
}
