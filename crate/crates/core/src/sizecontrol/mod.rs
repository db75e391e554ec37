//! Worst-case size, smallest size-controlling critical values, and maximal
//! p-values over a heteroskedasticity model.
//!
//! Rejection probabilities come from the exact quadratic-form kernel when
//! `q = 1` and from Monte Carlo with common random numbers otherwise. The
//! worst case over the covariance set is located by a three-stage scheme:
//! a large scored candidate pool, coarse simplex searches from the best
//! pool members, and a refined search from the stage-1 winners. Critical
//! values are then found either by the line-search loop (raise the
//! candidate value to the quantile under the currently worst covariance
//! until the size fits) or by direct maximization of simulated quantiles.

mod bootstrap;
mod candidates;

pub use bootstrap::{bootstrap_null_rejection, bootstrap_reject, BootstrapDecision, BootstrapVariant, SigmaEstimator};
pub use candidates::generate_candidates;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceCandidate, CovarianceModel};
use crate::feasibility::{self, Verdict};
use crate::model::TestingProblem;
use crate::optim::{self, NelderMeadOptions};
use crate::qform;
use crate::rng::{stream_rng, Stream};
use crate::statistics::{evaluate, StatisticSpec};
use crate::{Error, Result};

/// Search budgets and numerical tolerances. Defaults are desk-scaled; any
/// field can be overridden.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    /// Random candidate budget for stage 0.
    pub pool: usize,
    /// Local searches started from the best stage-0 candidates.
    pub stage1_starts: usize,
    /// Refined searches started from the best stage-1 results.
    pub stage2_starts: usize,
    /// Monte Carlo sample sizes per stage (used when `q > 1` or on
    /// request); must be nondecreasing.
    pub mc_draws: [usize; 3],
    /// Absolute accuracy of the exact kernel in stages 0 and 1.
    pub acc: f64,
    /// Accuracy in stage 2, the line searches, and quantile bisection.
    pub acc_refined: f64,
    /// Integrand evaluation budget per inversion.
    pub integrand_budget: usize,
    /// Convergence slack for the critical-value loop.
    pub eps: f64,
    /// Iteration cap for the critical-value loop.
    pub max_cv_iterations: usize,
    /// Relative tolerance and per-dimension iteration factor of the
    /// stage-1 simplex searches.
    pub stage1_rel_tol: f64,
    pub stage1_iter_factor: usize,
    /// Same for stage 2.
    pub stage2_rel_tol: f64,
    pub stage2_iter_factor: usize,
    /// A critical value above this multiple of the homoskedastic 95%
    /// quantile triggers a warm-start pass at the smaller value.
    pub warm_start_factor: f64,
    /// Proceed with critical-value searches on an `Inconclusive`
    /// feasibility verdict (size control known by external arguments).
    pub override_feasibility: bool,
    /// Monte Carlo replications for the bootstrap baselines.
    pub mc_reps: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            pool: 20_000,
            stage1_starts: 100,
            stage2_starts: 1,
            mc_draws: [1_000, 5_000, 20_000],
            acc: 1e-3,
            acc_refined: 1e-4,
            integrand_budget: 30_000,
            eps: 1e-3,
            max_cv_iterations: 25,
            stage1_rel_tol: 1e-2,
            stage1_iter_factor: 20,
            stage2_rel_tol: 1e-3,
            stage2_iter_factor: 30,
            warm_start_factor: 5.0,
            override_feasibility: false,
            mc_reps: 10_000,
        }
    }
}

impl SearchParams {
    /// Reduced budgets for the internal warm-start pass.
    fn warm_start_scale(&self) -> SearchParams {
        let mut p = self.clone();
        p.pool = (self.pool / 10).max(200);
        p.stage1_starts = (self.stage1_starts / 10).max(5);
        p.stage2_starts = 1;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.stage1_starts == 0 {
            return Err(Error::InvalidInput(
                "candidate pool and stage-1 starts must be positive".into(),
            ));
        }
        if !(self.mc_draws[0] <= self.mc_draws[1] && self.mc_draws[1] <= self.mc_draws[2]) {
            return Err(Error::InvalidInput(
                "Monte Carlo stage sizes must be nondecreasing".into(),
            ));
        }
        if !(self.acc > 0.0 && self.acc_refined > 0.0) {
            return Err(Error::InvalidInput("accuracies must be positive".into()));
        }
        Ok(())
    }
}

/// How rejection probabilities are computed.
#[derive(Debug, Clone, Copy)]
pub enum Method {
    /// Characteristic-function inversion (requires `q = 1`).
    Exact { acc: f64, lim: usize },
    /// Seeded Monte Carlo.
    MonteCarlo { draws: usize, seed: u64 },
}

/// Tag recorded in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageBest {
    pub stage: u8,
    pub best: f64,
}

/// Worst-case size report: the best rejection probability found is a
/// certified lower bound for the true size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeReport {
    pub size: f64,
    pub attaining_sigma: CovarianceCandidate,
    pub stage_trace: Vec<StageBest>,
    pub method: MethodTag,
    pub seed: u64,
    /// Set when the value was decided without search (short-circuits).
    pub note: Option<String>,
}

/// Critical-value report for both search algorithms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalValueReport {
    pub c: f64,
    /// `max(C*, c_hom)`, the proven lower bound the search starts from.
    pub c_low: f64,
    pub iterations: usize,
    pub final_size: f64,
    pub converged: bool,
}

/// A fixed standard-normal sample (columns are draws), shared by every
/// objective evaluation within a stage so the stage objective is a
/// deterministic function of the covariance.
struct ZSample {
    cols: DMatrix<f64>,
}

impl ZSample {
    fn draw(n: usize, count: usize, rng: &mut impl Rng) -> Self {
        let cols = DMatrix::from_fn(n, count, |_, _| rng.sample(rand_distr::StandardNormal));
        ZSample { cols }
    }
}

/// Null rejection probability `P_{mu, Sigma}(T >= c)`.
pub fn rejection_prob(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    sigma: &CovarianceCandidate,
    mu: &DVector<f64>,
    method: &Method,
) -> Result<f64> {
    if c <= 0.0 {
        return Ok(1.0);
    }
    match *method {
        Method::Exact { acc, lim } => {
            let rm = qform::reduction_matrix(problem, spec, c)?;
            exact_prob(problem, &rm.a, sigma, mu, acc, lim)
        }
        Method::MonteCarlo { draws, seed } => {
            let mut rng = stream_rng(seed, Stream::StageSample(255));
            let z = ZSample::draw(problem.n(), draws, &mut rng);
            mc_prob(problem, spec, c, sigma, mu, &z)
        }
    }
}

fn exact_prob(
    problem: &TestingProblem,
    a: &DMatrix<f64>,
    sigma: &CovarianceCandidate,
    mu: &DVector<f64>,
    acc: f64,
    lim: usize,
) -> Result<f64> {
    let nu = mean_shift(problem, sigma, mu);
    let spectrum = qform::spectrum(a, sigma, nu.as_ref())?;
    qform::tail_prob_nonneg(&spectrum, acc, lim)
}

/// Standardized mean shift `Sigma^{-1/2} (mu - mu0)`; `None` under the
/// null (saves the noncentrality bookkeeping).
fn mean_shift(
    problem: &TestingProblem,
    sigma: &CovarianceCandidate,
    mu: &DVector<f64>,
) -> Option<DVector<f64>> {
    let diff = mu - problem.mu0();
    if diff.norm() <= 1e-14 * problem.mu0().norm().max(1.0) {
        return None;
    }
    let s = sigma.sqrt_diag();
    Some(DVector::from_fn(diff.len(), |i, _| diff[i] / s[i]))
}

fn mc_prob(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    sigma: &CovarianceCandidate,
    mu: &DVector<f64>,
    z: &ZSample,
) -> Result<f64> {
    let s = sigma.sqrt_diag();
    let n = problem.n();
    let draws = z.cols.ncols();
    let mut hits = 0usize;
    let mut y = DVector::zeros(n);
    for j in 0..draws {
        for i in 0..n {
            y[i] = mu[i] + s[i] * z.cols[(i, j)];
        }
        if evaluate(problem, spec, &y)?.value >= c {
            hits += 1;
        }
    }
    Ok(hits as f64 / draws as f64)
}

/// Objective handed to the stage searches: a deterministic map from a
/// covariance candidate to a rejection probability (or, for the quantile
/// algorithm, to an empirical quantile).
enum Objective<'a> {
    Exact {
        a: &'a DMatrix<f64>,
        acc: f64,
        lim: usize,
    },
    Mc {
        spec: &'a StatisticSpec,
        c: f64,
        z: &'a ZSample,
    },
    McQuantile {
        spec: &'a StatisticSpec,
        level: f64,
        z: &'a ZSample,
    },
}

impl Objective<'_> {
    fn eval(&self, problem: &TestingProblem, sigma: &CovarianceCandidate) -> Result<f64> {
        match self {
            Objective::Exact { a, acc, lim } => {
                let spectrum = qform::spectrum(a, sigma, None)?;
                qform::tail_prob_nonneg(&spectrum, *acc, *lim)
            }
            Objective::Mc { spec, c, z } => mc_prob(problem, spec, *c, sigma, problem.mu0(), z),
            Objective::McQuantile { spec, level, z } => {
                let stats = simulated_statistics(problem, spec, sigma, z)?;
                Ok(empirical_quantile(stats, *level))
            }
        }
    }
}

fn simulated_statistics(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    sigma: &CovarianceCandidate,
    z: &ZSample,
) -> Result<Vec<f64>> {
    let s = sigma.sqrt_diag();
    let n = problem.n();
    let mu = problem.mu0();
    let mut out = Vec::with_capacity(z.cols.ncols());
    let mut y = DVector::zeros(n);
    for j in 0..z.cols.ncols() {
        for i in 0..n {
            y[i] = mu[i] + s[i] * z.cols[(i, j)];
        }
        out.push(evaluate(problem, spec, &y)?.value);
    }
    Ok(out)
}

/// Smallest order statistic `x_(ceil(N p))`; empirical `P(T >= q) <= 1-p`.
fn empirical_quantile(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let nn = values.len();
    let k = ((nn as f64 * p).ceil() as usize).clamp(1, nn);
    values[k - 1]
}

/// Output of the three-stage maximization.
struct StageOutcome {
    best_value: f64,
    best_sigma: CovarianceCandidate,
    trace: Vec<StageBest>,
}

/// The shared three-stage search: score the pool, locally optimize from
/// the leaders, refine the winners. `objectives` supplies one objective
/// per stage (they differ in accuracy / sample size).
fn three_stage_search(
    problem: &TestingProblem,
    model: &CovarianceModel,
    pool: Vec<CovarianceCandidate>,
    objectives: [&Objective<'_>; 3],
    params: &SearchParams,
) -> Result<StageOutcome> {
    let n = problem.n();
    let dim = model.search_dim(n);

    // Stage 0: score every candidate.
    let scored: Result<Vec<(usize, f64)>> = pool
        .par_iter()
        .enumerate()
        .map(|(i, c)| objectives[0].eval(problem, c).map(|p| (i, p)))
        .collect();
    let mut scored = scored?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut trace = vec![StageBest {
        stage: 0,
        best: scored.first().map_or(0.0, |s| s.1),
    }];

    // Stage 1: coarse local searches from the leaders.
    let starts: Vec<&CovarianceCandidate> = scored
        .iter()
        .take(params.stage1_starts)
        .map(|&(i, _)| &pool[i])
        .collect();
    let stage1_opts = NelderMeadOptions {
        rel_tol: params.stage1_rel_tol,
        max_iter: params.stage1_iter_factor * dim,
        init_step: 1.0,
    };
    let stage1: Result<Vec<(usize, f64, Vec<f64>)>> = starts
        .par_iter()
        .enumerate()
        .map(|(idx, start)| {
            run_local_search(problem, model, start, objectives[1], &stage1_opts)
                .map(|(theta, value)| (idx, value, theta))
        })
        .collect();
    let mut stage1 = stage1?;
    stage1.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    trace.push(StageBest {
        stage: 1,
        best: stage1.first().map_or(0.0, |s| s.1),
    });

    // Stage 2: refined searches from the stage-1 winners.
    let stage2_opts = NelderMeadOptions {
        rel_tol: params.stage2_rel_tol,
        max_iter: params.stage2_iter_factor * dim,
        init_step: 0.5,
    };
    let finalists: Vec<CovarianceCandidate> = stage1
        .iter()
        .take(params.stage2_starts.max(1))
        .map(|(_, _, theta)| model.candidate_from_params(theta, n))
        .collect();
    let stage2: Result<Vec<(usize, f64, Vec<f64>)>> = finalists
        .par_iter()
        .enumerate()
        .map(|(idx, start)| {
            run_local_search(problem, model, start, objectives[2], &stage2_opts)
                .map(|(theta, value)| (idx, value, theta))
        })
        .collect();
    let mut stage2 = stage2?;
    stage2.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let (_, best_value, best_theta) = stage2
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput("empty candidate pool".into()))?;
    trace.push(StageBest {
        stage: 2,
        best: best_value,
    });

    Ok(StageOutcome {
        best_value,
        best_sigma: model.candidate_from_params(&best_theta, n),
        trace,
    })
}

/// One simplex search in the model's unconstrained parameterization.
/// Errors inside the objective are latched and re-raised afterwards.
fn run_local_search(
    problem: &TestingProblem,
    model: &CovarianceModel,
    start: &CovarianceCandidate,
    objective: &Objective<'_>,
    opts: &NelderMeadOptions,
) -> Result<(Vec<f64>, f64)> {
    let n = problem.n();
    let theta0 = model.params_from_candidate(start, n);
    let mut first_error: Option<Error> = None;
    let mut f = |theta: &[f64]| -> f64 {
        let cand = model.candidate_from_params(theta, n);
        match objective.eval(problem, &cand) {
            Ok(p) => p,
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
                f64::NEG_INFINITY
            }
        }
    };
    let (theta, value) = optim::maximize(&mut f, &theta0, opts);
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok((theta, value))
}

/// Worst-case size of the rejection region `{T >= c}` over the model
/// (Algorithm `size`): the returned value is the best rejection
/// probability found, a certified lower bound for the true size.
pub fn size(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    model: &CovarianceModel,
    params: &SearchParams,
    seed: u64,
) -> Result<SizeReport> {
    size_with_extras(problem, spec, c, model, params, seed, &[], true)
}

#[allow(clippy::too_many_arguments)]
fn size_with_extras(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
    model: &CovarianceModel,
    params: &SearchParams,
    seed: u64,
    extras: &[CovarianceCandidate],
    allow_warm_start: bool,
) -> Result<SizeReport> {
    params.validate()?;
    model.validate(problem.n())?;
    let n = problem.n();
    let exact = problem.q() == 1;
    let method_tag = if exact {
        MethodTag::Exact
    } else {
        MethodTag::MonteCarlo
    };

    if c <= 0.0 {
        return Ok(SizeReport {
            size: 1.0,
            attaining_sigma: CovarianceCandidate::homoskedastic(n),
            stage_trace: Vec::new(),
            method: method_tag,
            seed,
            note: Some("nonpositive critical value: statistics are nonnegative".into()),
        });
    }

    // Below the lower bound C* the size over the full model is one; the
    // bound does not transfer to restricted models, where concentration on
    // a single coordinate may be infeasible.
    if matches!(model, CovarianceModel::HetFull) {
        let cs = feasibility::c_star(problem, spec)?;
        if c < cs * (1.0 - 1e-12) {
            let mut best_i = problem.index_sets().i1[0];
            let mut best_v = f64::NEG_INFINITY;
            for &i in &problem.index_sets().i1 {
                let mut y = problem.mu0().clone();
                y[i] += 1.0;
                let v = evaluate(problem, spec, &y)?.value;
                if v > best_v {
                    best_v = v;
                    best_i = i;
                }
            }
            return Ok(SizeReport {
                size: 1.0,
                attaining_sigma: CovarianceCandidate::near_degenerate(n, best_i),
                stage_trace: Vec::new(),
                method: method_tag,
                seed,
                note: Some(format!(
                    "critical value {c} is below the lower bound C* = {cs}: size is 1"
                )),
            });
        }
    }

    // Reduction matrix once per call (exact path).
    let reduction = if exact {
        Some(qform::reduction_matrix(problem, spec, c)?)
    } else {
        None
    };

    let mut pool = candidates::generate_candidates(
        problem,
        model,
        reduction.as_ref().map(|r| &r.a),
        params.pool,
        seed,
    );
    for e in extras {
        if let Ok(c) = model.project(e.tau_sq()) {
            pool.push(c);
        }
    }

    // Warm start for large critical values: locate the worst covariance at
    // the homoskedastic 95% quantile first and seed it into the pool.
    if allow_warm_start && params.warm_start_factor > 0.0 {
        let hom_q = homoskedastic_quantile(problem, spec, 0.95, params, seed)?;
        if c > params.warm_start_factor * hom_q {
            let mini = params.warm_start_scale();
            let warm = size_with_extras(
                problem,
                spec,
                hom_q,
                model,
                &mini,
                seed ^ 0xa5a5_a5a5,
                &[],
                false,
            )?;
            pool.push(warm.attaining_sigma);
        }
    }

    // Per-stage Monte Carlo samples (fixed within each stage).
    let z_samples: Option<[ZSample; 3]> = if exact {
        None
    } else {
        Some([
            ZSample::draw(n, params.mc_draws[0], &mut stream_rng(seed, Stream::StageSample(0))),
            ZSample::draw(n, params.mc_draws[1], &mut stream_rng(seed, Stream::StageSample(1))),
            ZSample::draw(n, params.mc_draws[2], &mut stream_rng(seed, Stream::StageSample(2))),
        ])
    };

    let outcome = if let Some(rm) = &reduction {
        let coarse = Objective::Exact {
            a: &rm.a,
            acc: params.acc,
            lim: params.integrand_budget,
        };
        let refined = Objective::Exact {
            a: &rm.a,
            acc: params.acc_refined,
            lim: params.integrand_budget,
        };
        three_stage_search(problem, model, pool, [&coarse, &coarse, &refined], params)?
    } else {
        let z = z_samples.as_ref().unwrap();
        let s0 = Objective::Mc {
            spec,
            c,
            z: &z[0],
        };
        let s1 = Objective::Mc {
            spec,
            c,
            z: &z[1],
        };
        let s2 = Objective::Mc {
            spec,
            c,
            z: &z[2],
        };
        three_stage_search(problem, model, pool, [&s0, &s1, &s2], params)?
    };

    Ok(SizeReport {
        size: outcome.best_value,
        attaining_sigma: outcome.best_sigma,
        stage_trace: outcome.trace,
        method: method_tag,
        seed,
        note: None,
    })
}

/// Smallest `c` with `P_{mu0, I/n}(T >= c) <= alpha` (the homoskedastic
/// quantile). Exact bisection for `q = 1`, empirical quantile otherwise.
pub fn c_hom(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    alpha: f64,
    params: &SearchParams,
    seed: u64,
) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must be in (0, 1)".into()));
    }
    homoskedastic_quantile(problem, spec, 1.0 - alpha, params, seed)
}

fn homoskedastic_quantile(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    level: f64,
    params: &SearchParams,
    seed: u64,
) -> Result<f64> {
    let n = problem.n();
    let hom = CovarianceCandidate::homoskedastic(n);
    if problem.q() == 1 {
        let alpha = 1.0 - level;
        let prob = |c: f64| -> Result<f64> {
            let rm = qform::reduction_matrix(problem, spec, c)?;
            exact_prob(
                problem,
                &rm.a,
                &hom,
                problem.mu0(),
                params.acc_refined,
                params.integrand_budget,
            )
        };
        let mut hi = 1.0;
        let mut guard = 0;
        while prob(hi)? > alpha {
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(Error::InvalidInput(
                    "homoskedastic quantile bracketing failed".into(),
                ));
            }
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if prob(mid)? > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-9 * hi.max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    } else {
        let mut rng = stream_rng(seed, Stream::StageSample(4));
        let z = ZSample::draw(n, params.mc_draws[2], &mut rng);
        let stats = simulated_statistics(problem, spec, &hom, &z)?;
        Ok(empirical_quantile(stats, level))
    }
}

/// Gate shared by the critical-value searches.
fn feasibility_gate(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    model: &CovarianceModel,
    params: &SearchParams,
) -> Result<()> {
    let report = feasibility::check(problem, spec, model)?;
    match report.verdict {
        Verdict::SizeControllable => Ok(()),
        Verdict::Inconclusive if params.override_feasibility => Ok(()),
        Verdict::Inconclusive => Err(Error::FeasibilityRefused(
            "sufficient size-control condition fails (set override_feasibility to proceed \
             when controllability is known by other arguments)"
                .into(),
        )),
        Verdict::SizeOneForAllC => Err(Error::FeasibilityRefused(
            "size equals one for every critical value".into(),
        )),
        Verdict::TriviallyZeroStatistic => Err(Error::FeasibilityRefused(
            "statistic is identically zero".into(),
        )),
        Verdict::ConstantStatistic => Err(Error::FeasibilityRefused(
            "statistic is constant off its singularity locus; no smallest \
             size-controlling critical value exists"
                .into(),
        )),
    }
}

/// Smallest size-controlling critical value by line search (Algorithm
/// CV1): start at `max(C*, c_hom)`; while the size exceeds `alpha + eps`,
/// raise the candidate value to the `(1-alpha)`-quantile under the
/// covariance attaining the current size.
pub fn critical_value(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    alpha: f64,
    model: &CovarianceModel,
    params: &SearchParams,
    seed: u64,
) -> Result<CriticalValueReport> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must be in (0, 1)".into()));
    }
    params.validate()?;
    feasibility_gate(problem, spec, model, params)?;

    let cs = feasibility::c_star(problem, spec)?;
    let chom = c_hom(problem, spec, alpha, params, seed)?;
    let c_low = cs.max(chom);
    let mut c = c_low;
    let mut extras: Vec<CovarianceCandidate> = Vec::new();
    let mut iterations = 0usize;

    loop {
        let report = size_with_extras(problem, spec, c, model, params, seed, &extras, true)?;
        if report.size <= alpha + params.eps {
            return Ok(CriticalValueReport {
                c,
                c_low,
                iterations,
                final_size: report.size,
                converged: true,
            });
        }
        if iterations >= params.max_cv_iterations {
            return Err(Error::NotConverged {
                report: CriticalValueReport {
                    c,
                    c_low,
                    iterations,
                    final_size: report.size,
                    converged: false,
                },
            });
        }
        iterations += 1;
        let c_plus = sigma_quantile(
            problem,
            spec,
            alpha,
            &report.attaining_sigma,
            c,
            params,
            seed,
        )?;
        extras.clear();
        extras.push(report.attaining_sigma);
        // Strictly increase to guarantee progress.
        c = c_plus.max(c * (1.0 + 1e-12) + 1e-300);
    }
}

/// Smallest `c' >= c0` with `P_{mu0, sigma}(T >= c') <= alpha`, the
/// quantile step of the line search.
fn sigma_quantile(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    alpha: f64,
    sigma: &CovarianceCandidate,
    c0: f64,
    params: &SearchParams,
    seed: u64,
) -> Result<f64> {
    if problem.q() == 1 {
        let prob = |c: f64| -> Result<f64> {
            let rm = qform::reduction_matrix(problem, spec, c)?;
            exact_prob(
                problem,
                &rm.a,
                sigma,
                problem.mu0(),
                params.acc_refined,
                params.integrand_budget,
            )
        };
        let mut lo = c0;
        let mut hi = c0.max(1e-12) * 1.5;
        let mut guard = 0;
        while prob(hi)? > alpha {
            lo = hi;
            hi *= 1.5;
            guard += 1;
            if guard > 200 {
                return Err(Error::InvalidInput(
                    "quantile line search failed to bracket".into(),
                ));
            }
        }
        for _ in 0..60 {
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
    } else {
        let mut rng = stream_rng(seed, Stream::StageSample(5));
        let z = ZSample::draw(problem.n(), params.mc_draws[2], &mut rng);
        let stats = simulated_statistics(problem, spec, sigma, &z)?;
        Ok(empirical_quantile(stats, 1.0 - alpha))
    }
}

/// Smallest size-controlling critical value via quantile maximization
/// (Algorithm CV2): maximize the simulated `(1-alpha)`-quantile of the
/// statistic over the model with the same three-stage scheme, Monte Carlo
/// sample sizes increasing per stage.
pub fn critical_value_quantile(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    alpha: f64,
    model: &CovarianceModel,
    params: &SearchParams,
    seed: u64,
) -> Result<CriticalValueReport> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must be in (0, 1)".into()));
    }
    params.validate()?;
    feasibility_gate(problem, spec, model, params)?;

    let n = problem.n();
    let level = 1.0 - alpha;
    let z0 = ZSample::draw(n, params.mc_draws[0], &mut stream_rng(seed, Stream::StageSample(0)));
    let z1 = ZSample::draw(n, params.mc_draws[1], &mut stream_rng(seed, Stream::StageSample(1)));
    let z2 = ZSample::draw(n, params.mc_draws[2], &mut stream_rng(seed, Stream::StageSample(2)));
    let s0 = Objective::McQuantile {
        spec,
        level,
        z: &z0,
    };
    let s1 = Objective::McQuantile {
        spec,
        level,
        z: &z1,
    };
    let s2 = Objective::McQuantile {
        spec,
        level,
        z: &z2,
    };
    let pool = candidates::generate_candidates(problem, model, None, params.pool, seed);
    let outcome = three_stage_search(problem, model, pool, [&s0, &s1, &s2], params)?;

    let cs = feasibility::c_star(problem, spec)?;
    let chom = c_hom(problem, spec, alpha, params, seed)?;
    let c_low = cs.max(chom);
    // The proven lower bound dominates any Monte Carlo undershoot.
    let c = outcome.best_value.max(c_low);
    let final_size = size(problem, spec, c, model, params, seed)?.size;
    Ok(CriticalValueReport {
        c,
        c_low,
        iterations: params.stage1_starts + params.stage2_starts,
        final_size,
        converged: final_size <= alpha + params.eps,
    })
}

/// Maximal p-value of an observed data vector: the size of the test whose
/// critical value is the observed statistic. Comparing it to `alpha`
/// reproduces the smallest-critical-value test without computing that
/// critical value.
pub fn max_pvalue(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    y_obs: &DVector<f64>,
    model: &CovarianceModel,
    params: &SearchParams,
    seed: u64,
) -> Result<f64> {
    let t_obs = evaluate(problem, spec, y_obs)?.value;
    Ok(size(problem, spec, t_obs, model, params, seed)?.size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{location_problem, two_group_problem};
    use crate::statistics::StatisticFamily;
    use approx::assert_relative_eq;
    use statrs::distribution::ContinuousCDF;

    fn quick_params() -> SearchParams {
        SearchParams {
            pool: 400,
            stage1_starts: 10,
            stage2_starts: 1,
            mc_draws: [400, 1000, 4000],
            ..SearchParams::default()
        }
    }

    #[test]
    fn rejection_prob_nonpositive_c_is_one() {
        let p = location_problem(6, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let sigma = CovarianceCandidate::homoskedastic(6);
        let prob = rejection_prob(
            &p,
            &spec,
            0.0,
            &sigma,
            p.mu0(),
            &Method::Exact {
                acc: 1e-4,
                lim: 30_000,
            },
        )
        .unwrap();
        assert_eq!(prob, 1.0);
    }

    #[test]
    fn homoskedastic_uc_is_pivotal_f() {
        // Location model: T_uc is the squared t statistic; under
        // homoskedasticity P(T >= F-quantile) = alpha.
        let n = 12;
        let p = location_problem(n, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
        let c = f.inverse_cdf(0.95);
        let sigma = CovarianceCandidate::homoskedastic(n);
        let prob = rejection_prob(
            &p,
            &spec,
            c,
            &sigma,
            p.mu0(),
            &Method::Exact {
                acc: 1e-5,
                lim: 30_000,
            },
        )
        .unwrap();
        assert_relative_eq!(prob, 0.05, epsilon = 1e-4);
    }

    #[test]
    fn exact_and_monte_carlo_agree() {
        let p = two_group_problem(10, 4).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc2);
        let sigma = CovarianceCandidate::from_unnormalized(DVector::from_fn(10, |i, _| {
            1.0 + (i as f64) * 0.4
        }))
        .unwrap();
        for c in [1.0, 3.0, 6.0] {
            let exact = rejection_prob(
                &p,
                &spec,
                c,
                &sigma,
                p.mu0(),
                &Method::Exact {
                    acc: 1e-5,
                    lim: 30_000,
                },
            )
            .unwrap();
            let draws = 100_000;
            let mc = rejection_prob(
                &p,
                &spec,
                c,
                &sigma,
                p.mu0(),
                &Method::MonteCarlo { draws, seed: 99 },
            )
            .unwrap();
            let se = (exact * (1.0 - exact) / draws as f64).sqrt().max(1e-5);
            assert!(
                (exact - mc).abs() <= 4.0 * se,
                "c = {c}: exact {exact} vs mc {mc}"
            );
        }
    }

    #[test]
    fn c_hom_matches_f_quantile_for_location_uc() {
        let n = 30;
        let p = location_problem(n, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let ours = c_hom(&p, &spec, 0.05, &quick_params(), 1).unwrap();
        let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
        assert_relative_eq!(ours, f.inverse_cdf(0.95), max_relative = 1e-4);
    }

    #[test]
    fn c_hom_scales_between_hc0_and_hc1() {
        let p = two_group_problem(12, 5).unwrap();
        let params = quick_params();
        let c0 = c_hom(
            &p,
            &StatisticSpec::new(&p, StatisticFamily::Hc0),
            0.05,
            &params,
            1,
        )
        .unwrap();
        let c1 = c_hom(
            &p,
            &StatisticSpec::new(&p, StatisticFamily::Hc1),
            0.05,
            &params,
            1,
        )
        .unwrap();
        let ratio = (p.n() as f64 - p.k() as f64) / p.n() as f64;
        assert_relative_eq!(c1, ratio * c0, max_relative = 1e-4);
    }

    #[test]
    fn size_short_circuits_below_c_star() {
        let p = two_group_problem(8, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let cs = feasibility::c_star(&p, &spec).unwrap();
        let rep = size(
            &p,
            &spec,
            cs * 0.5,
            &CovarianceModel::HetFull,
            &quick_params(),
            3,
        )
        .unwrap();
        assert_eq!(rep.size, 1.0);
        assert!(rep.note.is_some());
    }

    #[test]
    fn homoskedastic_singleton_model_size_is_alpha() {
        let n = 10;
        let p = location_problem(n, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let model = CovarianceModel::Grouped {
            group_sizes: vec![n],
        };
        let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
        let c = f.inverse_cdf(0.95);
        let rep = size(&p, &spec, c, &model, &quick_params(), 5).unwrap();
        assert_relative_eq!(rep.size, 0.05, epsilon = 2e-3);
    }

    #[test]
    fn size_monotone_in_c() {
        let p = two_group_problem(8, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc2);
        let params = quick_params();
        let mut last = f64::INFINITY;
        for c in [2.0, 4.0, 8.0, 16.0] {
            let rep = size(&p, &spec, c, &CovarianceModel::HetFull, &params, 11).unwrap();
            assert!(rep.size <= last + 2.0 * params.acc);
            last = rep.size;
        }
    }

    #[test]
    fn determinism_same_seed_same_report() {
        let p = two_group_problem(8, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc3);
        let params = quick_params();
        let a = size(&p, &spec, 5.0, &CovarianceModel::HetFull, &params, 21).unwrap();
        let b = size(&p, &spec, 5.0, &CovarianceModel::HetFull, &params, 21).unwrap();
        assert_eq!(a.size, b.size);
        assert_eq!(a.attaining_sigma.tau_sq(), b.attaining_sigma.tau_sq());
    }

    #[test]
    fn critical_value_location_model_close_to_f_quantile() {
        let n = 10;
        let p = location_problem(n, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let rep = critical_value(
            &p,
            &spec,
            0.05,
            &CovarianceModel::HetFull,
            &quick_params(),
            7,
        )
        .unwrap();
        let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
        let target = f.inverse_cdf(0.95);
        assert!(rep.converged);
        assert!(
            (rep.c - target).abs() <= 0.05,
            "c = {}, F quantile = {target}",
            rep.c
        );
    }

    #[test]
    fn feasibility_gate_refuses_size_one_cases() {
        // Lever with the restriction loading on it: size one for all c.
        let n = 7;
        let mut x = nalgebra::DMatrix::zeros(n, 2);
        x[(0, 0)] = 1.0;
        for i in 0..n {
            x[(i, 1)] = 1.0 + i as f64;
        }
        let r_mat = nalgebra::DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let p = crate::model::TestingProblem::build(x, r_mat, DVector::zeros(1)).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let err = critical_value(
            &p,
            &spec,
            0.05,
            &CovarianceModel::HetFull,
            &quick_params(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FeasibilityRefused(_)));
    }

    #[test]
    fn quantile_method_on_singleton_model_returns_hom_quantile() {
        let n = 9;
        let p = location_problem(n, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let model = CovarianceModel::Grouped {
            group_sizes: vec![n],
        };
        let params = quick_params();
        let rep = critical_value_quantile(&p, &spec, 0.05, &model, &params, 13).unwrap();
        let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
        // Monte Carlo quantile of a singleton model: generous band.
        assert_relative_eq!(rep.c, f.inverse_cdf(0.95), max_relative = 0.15);
    }

    #[test]
    fn max_pvalue_short_circuit_below_c_star() {
        let p = two_group_problem(8, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc2);
        // A y whose statistic is tiny: p-value 1.
        let y = p.mu0() + DVector::from_element(8, 1e-6);
        let pval = max_pvalue(
            &p,
            &spec,
            &y,
            &CovarianceModel::HetFull,
            &quick_params(),
            3,
        )
        .unwrap();
        assert_eq!(pval, 1.0);
    }
}
