//! The twelve test statistics and their singularity conventions.
//!
//! Unrestricted statistics (UC and the HC0-HC4 weighted forms) build their
//! covariance estimator from OLS residuals; restricted statistics (UCR,
//! HC0R-HC4R) use residuals from the null-restricted fit. A statistic whose
//! covariance estimator is singular at `y` is assigned the value zero; the
//! singular set is a Lebesgue null set whenever the corresponding rank
//! assumption holds, so the convention never influences probabilities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::TestingProblem;
use crate::{Error, Result, RANK_TOL};

/// The statistic families. `R`-suffixed families use restricted residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatisticFamily {
    #[serde(rename = "UC")]
    Uc,
    #[serde(rename = "HC0")]
    Hc0,
    #[serde(rename = "HC1")]
    Hc1,
    #[serde(rename = "HC2")]
    Hc2,
    #[serde(rename = "HC3")]
    Hc3,
    #[serde(rename = "HC4")]
    Hc4,
    #[serde(rename = "UCR")]
    Ucr,
    #[serde(rename = "HC0R")]
    Hc0r,
    #[serde(rename = "HC1R")]
    Hc1r,
    #[serde(rename = "HC2R")]
    Hc2r,
    #[serde(rename = "HC3R")]
    Hc3r,
    #[serde(rename = "HC4R")]
    Hc4r,
}

impl StatisticFamily {
    pub const ALL: [StatisticFamily; 12] = [
        StatisticFamily::Uc,
        StatisticFamily::Hc0,
        StatisticFamily::Hc1,
        StatisticFamily::Hc2,
        StatisticFamily::Hc3,
        StatisticFamily::Hc4,
        StatisticFamily::Ucr,
        StatisticFamily::Hc0r,
        StatisticFamily::Hc1r,
        StatisticFamily::Hc2r,
        StatisticFamily::Hc3r,
        StatisticFamily::Hc4r,
    ];

    /// Whether the covariance estimator uses restricted residuals.
    pub fn is_restricted(self) -> bool {
        matches!(
            self,
            StatisticFamily::Ucr
                | StatisticFamily::Hc0r
                | StatisticFamily::Hc1r
                | StatisticFamily::Hc2r
                | StatisticFamily::Hc3r
                | StatisticFamily::Hc4r
        )
    }

    /// Whether this is a heteroskedasticity-weighted (HC-type) statistic.
    pub fn is_robust(self) -> bool {
        !matches!(self, StatisticFamily::Uc | StatisticFamily::Ucr)
    }

    pub fn label(self) -> &'static str {
        match self {
            StatisticFamily::Uc => "UC",
            StatisticFamily::Hc0 => "HC0",
            StatisticFamily::Hc1 => "HC1",
            StatisticFamily::Hc2 => "HC2",
            StatisticFamily::Hc3 => "HC3",
            StatisticFamily::Hc4 => "HC4",
            StatisticFamily::Ucr => "UCR",
            StatisticFamily::Hc0r => "HC0R",
            StatisticFamily::Hc1r => "HC1R",
            StatisticFamily::Hc2r => "HC2R",
            StatisticFamily::Hc3r => "HC3R",
            StatisticFamily::Hc4r => "HC4R",
        }
    }
}

impl std::str::FromStr for StatisticFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        StatisticFamily::ALL
            .iter()
            .copied()
            .find(|f| f.label() == up)
            .ok_or_else(|| Error::InvalidInput(format!("unknown statistic family: {s}")))
    }
}

impl std::fmt::Display for StatisticFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A statistic family together with its frozen weight vector.
///
/// Weights depend only on the design (and, for restricted families, on the
/// restriction matrix), never on `r`; they are computed once here and
/// reused everywhere.
#[derive(Debug, Clone)]
pub struct StatisticSpec {
    pub family: StatisticFamily,
    /// Length-n weight vector `d` (unrestricted) or `d~` (restricted);
    /// all ones for UC/UCR.
    pub weights: DVector<f64>,
}

/// Evaluated statistic with the convention flag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StatisticValue {
    pub value: f64,
    /// Whether the singularity convention fired (value forced to 0).
    pub degenerate: bool,
}

impl StatisticSpec {
    pub fn new(problem: &TestingProblem, family: StatisticFamily) -> Self {
        let n = problem.n();
        let nf = n as f64;
        let k = problem.k() as f64;
        let q = problem.q() as f64;
        let g = problem.geometry();

        let weights = match family {
            StatisticFamily::Uc | StatisticFamily::Ucr => DVector::from_element(n, 1.0),
            StatisticFamily::Hc0 | StatisticFamily::Hc0r => DVector::from_element(n, 1.0),
            StatisticFamily::Hc1 => DVector::from_element(n, nf / (nf - k)),
            StatisticFamily::Hc1r => DVector::from_element(n, nf / (nf - (k - q))),
            StatisticFamily::Hc2 => leverage_weights(&g.hat_diag, |h| 1.0 / (1.0 - h)),
            StatisticFamily::Hc3 => leverage_weights(&g.hat_diag, |h| (1.0 - h).powi(-2)),
            StatisticFamily::Hc4 => leverage_weights(&g.hat_diag, |h| {
                (1.0 - h).powf(-(nf * h / k).min(4.0))
            }),
            StatisticFamily::Hc2r => {
                leverage_weights(&g.restricted_hat_diag, |h| 1.0 / (1.0 - h))
            }
            StatisticFamily::Hc3r => {
                leverage_weights(&g.restricted_hat_diag, |h| (1.0 - h).powi(-2))
            }
            StatisticFamily::Hc4r => {
                if problem.k() == problem.q() {
                    // Restricted leverages vanish and the exponent is zero
                    // by convention: all weights equal one.
                    DVector::from_element(n, 1.0)
                } else {
                    leverage_weights(&g.restricted_hat_diag, |h| {
                        (1.0 - h).powf(-(nf * h / (k - q)).min(4.0))
                    })
                }
            }
        };
        StatisticSpec { family, weights }
    }

    /// All twelve specs for a problem.
    pub fn all(problem: &TestingProblem) -> Vec<StatisticSpec> {
        StatisticFamily::ALL
            .iter()
            .map(|&f| StatisticSpec::new(problem, f))
            .collect()
    }
}

/// Apply a leverage-based weight, falling back to 1 at (numerical)
/// leverage one, where the residual is identically zero anyway.
fn leverage_weights(lev: &DVector<f64>, f: impl Fn(f64) -> f64) -> DVector<f64> {
    DVector::from_iterator(
        lev.len(),
        lev.iter().map(|&h| {
            if 1.0 - h <= RANK_TOL * RANK_TOL {
                1.0
            } else {
                f(h)
            }
        }),
    )
}

/// `Omega(y) = V' diag(w u^2) V` where `V = X (X'X)^{-1} R'` and `u` is the
/// relevant residual vector.
fn omega(problem: &TestingProblem, weights: &DVector<f64>, resid: &DVector<f64>) -> DMatrix<f64> {
    let v = &problem.geometry().v_mat; // n x q
    let scaled = DVector::from_iterator(
        resid.len(),
        resid
            .iter()
            .zip(weights.iter())
            .map(|(&u, &w)| w * u * u),
    );
    let mut vs = v.clone();
    for (i, mut row) in vs.row_iter_mut().enumerate() {
        row *= scaled[i];
    }
    v.transpose() * vs
}

/// Quadratic form `m' Omega^{-1} m` through the eigendecomposition already
/// needed for the singularity test. Returns `None` when Omega is singular
/// at the crate tolerance.
fn inverse_quadratic(omega: &DMatrix<f64>, m: &DVector<f64>) -> Option<f64> {
    let eig = nalgebra::SymmetricEigen::new(omega.clone());
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max_ev > 0.0) {
        return None;
    }
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_ev <= RANK_TOL * max_ev {
        return None;
    }
    let rotated = eig.eigenvectors.transpose() * m;
    Some(
        rotated
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&t, &ev)| t * t / ev)
            .sum(),
    )
}

/// Evaluate a test statistic at `y` with the paper's conventions: the value
/// is zero whenever the relevant covariance estimator is singular (HC
/// families) or the relevant residual vector vanishes (UC/UCR).
pub fn evaluate(problem: &TestingProblem, spec: &StatisticSpec, y: &DVector<f64>) -> Result<StatisticValue> {
    let (u_hat, u_tilde) = problem.residuals(y)?;
    let n = problem.n() as f64;
    let k = problem.k() as f64;
    let q = problem.q() as f64;
    let m = problem.restriction_discrepancy(y);
    // Vanishing residuals force the degenerate branch directly: the
    // eigenvalue ratio of the covariance estimator is scale free and
    // cannot detect an all-zero residual vector on its own.
    let u_hat_zero = u_hat.norm() <= RANK_TOL * y.norm();
    let u_tilde_zero = u_tilde.norm() <= RANK_TOL * (y - problem.mu0()).norm();

    let value = match spec.family {
        StatisticFamily::Uc => {
            if u_hat_zero {
                None
            } else {
                let sigma2 = u_hat.norm_squared() / (n - k);
                classical_form(problem, &m, sigma2)
            }
        }
        StatisticFamily::Ucr => {
            if u_tilde_zero {
                None
            } else {
                let sigma2 = u_tilde.norm_squared() / (n - (k - q));
                classical_form(problem, &m, sigma2)
            }
        }
        f if !f.is_restricted() => {
            if u_hat_zero {
                None
            } else {
                let om = omega(problem, &spec.weights, &u_hat);
                inverse_quadratic(&om, &m)
            }
        }
        _ => {
            if u_tilde_zero {
                None
            } else {
                let om = omega(problem, &spec.weights, &u_tilde);
                inverse_quadratic(&om, &m)
            }
        }
    };

    Ok(match value {
        Some(v) => StatisticValue {
            value: v.max(0.0),
            degenerate: false,
        },
        None => StatisticValue {
            value: 0.0,
            degenerate: true,
        },
    })
}

fn classical_form(problem: &TestingProblem, m: &DVector<f64>, sigma2: f64) -> Option<f64> {
    if !(sigma2 > 0.0) {
        return None;
    }
    // R (X'X)^{-1} R' = V'V.
    let v = &problem.geometry().v_mat;
    let core = v.transpose() * v;
    inverse_quadratic(&(core * sigma2), m)
}

/// The rank-deficiency matrix `B(y) = R (X'X)^{-1} X' diag(u_hat(y))` (or
/// its restricted analogue with `u_tilde`) and its numerical rank. The
/// covariance estimator of the corresponding HC statistic is singular at
/// `y` exactly when the rank is below `q`.
pub fn b_matrix(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    y: &DVector<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    if !spec.family.is_robust() {
        return Err(Error::InvalidInput(
            "B matrix is defined for the HC-type families only".into(),
        ));
    }
    let (u_hat, u_tilde) = problem.residuals(y)?;
    let (resid, resid_zero) = if spec.family.is_restricted() {
        let zero = u_tilde.norm() <= RANK_TOL * (y - problem.mu0()).norm();
        (u_tilde, zero)
    } else {
        let zero = u_hat.norm() <= RANK_TOL * y.norm();
        (u_hat, zero)
    };
    let w = problem.geometry().v_mat.transpose(); // q x n
    let mut b = w.clone();
    for (j, mut col) in b.column_iter_mut().enumerate() {
        col *= resid[j];
    }
    let rank = if resid_zero {
        0
    } else {
        let sv = b.clone().svd(false, false).singular_values;
        let max = sv.max();
        if max <= 0.0 {
            0
        } else {
            sv.iter().filter(|&&s| s > RANK_TOL * max).count()
        }
    };
    Ok((b, rank))
}

/// The strictly increasing bijection linking the restricted and
/// unrestricted classical statistics:
/// `g(x) = (n - (k - q)) x / (n - k + x)`, with range `[0, n - (k - q))`.
pub fn g_transform(problem: &TestingProblem, t_uc_value: f64) -> f64 {
    let n = problem.n() as f64;
    let k = problem.k() as f64;
    let q = problem.q() as f64;
    (n - (k - q)) * t_uc_value / (n - k + t_uc_value)
}
