//! Heteroskedasticity models and points inside them.
//!
//! A covariance candidate is the diagonal `tau^2` of a positive diagonal
//! matrix with unit trace. The full model allows any such diagonal; the
//! grouped model forces the diagonal to be constant within known groups;
//! the bounded model imposes a strictly positive lower bound on every
//! entry.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The feasible set of covariance diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceModel {
    /// All positive diagonals with unit trace.
    HetFull,
    /// Constant variance within each contiguous group.
    Grouped { group_sizes: Vec<usize> },
    /// Every diagonal entry at least `tau_star_sq`, which must lie in
    /// `(0, 1/n)`.
    BoundedBelow { tau_star_sq: f64 },
}

impl CovarianceModel {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            CovarianceModel::HetFull => Ok(()),
            CovarianceModel::Grouped { group_sizes } => {
                if group_sizes.is_empty() || group_sizes.iter().any(|&s| s == 0) {
                    return Err(Error::InfeasibleModel(
                        "group sizes must be positive".into(),
                    ));
                }
                let total: usize = group_sizes.iter().sum();
                if total != n {
                    return Err(Error::InfeasibleModel(format!(
                        "group sizes sum to {total}, expected {n}"
                    )));
                }
                Ok(())
            }
            CovarianceModel::BoundedBelow { tau_star_sq } => {
                if !(*tau_star_sq > 0.0 && *tau_star_sq < 1.0 / n as f64) {
                    return Err(Error::InfeasibleModel(format!(
                        "tau_star_sq must lie in (0, 1/n) = (0, {}), got {tau_star_sq}",
                        1.0 / n as f64
                    )));
                }
                Ok(())
            }
        }
    }

    /// Dimension of the unconstrained search space parameterizing the model.
    pub fn search_dim(&self, n: usize) -> usize {
        match self {
            CovarianceModel::HetFull | CovarianceModel::BoundedBelow { .. } => n,
            CovarianceModel::Grouped { group_sizes } => group_sizes.len(),
        }
    }

    /// Half-open index ranges of the groups (the full model and bounded
    /// model treat every coordinate as its own group).
    pub fn group_ranges(&self, n: usize) -> Vec<(usize, usize)> {
        match self {
            CovarianceModel::Grouped { group_sizes } => {
                let mut out = Vec::with_capacity(group_sizes.len());
                let mut start = 0;
                for &s in group_sizes {
                    out.push((start, start + s));
                    start += s;
                }
                out
            }
            _ => (0..n).map(|i| (i, i + 1)).collect(),
        }
    }

    /// Map an unconstrained parameter vector to a feasible candidate via a
    /// softmax, keeping iterates strictly inside the model.
    pub fn candidate_from_params(&self, theta: &[f64], n: usize) -> CovarianceCandidate {
        let softmax = |vals: &[f64]| -> Vec<f64> {
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|&v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|&e| e / sum).collect()
        };
        let tau_sq = match self {
            CovarianceModel::HetFull => DVector::from_vec(softmax(theta)),
            CovarianceModel::Grouped { group_sizes } => {
                let masses = softmax(theta);
                let mut out = DVector::zeros(n);
                let mut idx = 0;
                for (j, &s) in group_sizes.iter().enumerate() {
                    let per = masses[j] / s as f64;
                    for _ in 0..s {
                        out[idx] = per;
                        idx += 1;
                    }
                }
                out
            }
            CovarianceModel::BoundedBelow { tau_star_sq } => {
                let free = 1.0 - n as f64 * tau_star_sq;
                let soft = softmax(theta);
                DVector::from_iterator(n, soft.iter().map(|&s| tau_star_sq + free * s))
            }
        };
        CovarianceCandidate { tau_sq }
    }

    /// Inverse of [`Self::candidate_from_params`] up to an additive
    /// constant, used to initialize local searches at a candidate.
    pub fn params_from_candidate(&self, cand: &CovarianceCandidate, _n: usize) -> Vec<f64> {
        const FLOOR: f64 = 1e-12;
        match self {
            CovarianceModel::HetFull => {
                cand.tau_sq.iter().map(|&t| t.max(FLOOR).ln()).collect()
            }
            CovarianceModel::Grouped { group_sizes } => {
                let mut out = Vec::with_capacity(group_sizes.len());
                let mut idx = 0;
                for &s in group_sizes {
                    let mass: f64 = (0..s).map(|j| cand.tau_sq[idx + j]).sum();
                    out.push(mass.max(FLOOR).ln());
                    idx += s;
                }
                out
            }
            CovarianceModel::BoundedBelow { tau_star_sq } => cand
                .tau_sq
                .iter()
                .map(|&t| (t - tau_star_sq).max(FLOOR).ln())
                .collect(),
        }
    }

    /// Project an arbitrary positive diagonal into the feasible set:
    /// group-averaging for the grouped model, clamp-and-renormalize for the
    /// bounded model.
    pub fn project(&self, tau_sq: &DVector<f64>) -> Result<CovarianceCandidate> {
        let n = tau_sq.len();
        self.validate(n)?;
        let mut t = tau_sq.clone();
        let total: f64 = t.iter().sum();
        if !(total > 0.0) || t.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput(
                "covariance diagonal must be nonnegative with positive sum".into(),
            ));
        }
        t /= total;
        match self {
            CovarianceModel::HetFull => CovarianceCandidate::new(t),
            CovarianceModel::Grouped { .. } => {
                let mut out = t.clone();
                for (start, end) in self.group_ranges(n) {
                    let mass: f64 = (start..end).map(|i| t[i]).sum();
                    let per = mass / (end - start) as f64;
                    for i in start..end {
                        out[i] = per;
                    }
                }
                CovarianceCandidate::new(out)
            }
            CovarianceModel::BoundedBelow { tau_star_sq } => {
                let bound = *tau_star_sq;
                let mut out = t.clone();
                // Clamp deficient entries and redistribute the excess over
                // the rest until feasible; terminates in at most n passes.
                for _ in 0..n {
                    let deficit: Vec<usize> =
                        (0..n).filter(|&i| out[i] < bound).collect();
                    if deficit.is_empty() {
                        break;
                    }
                    let clamped_mass = bound * deficit.len() as f64;
                    let free_mass: f64 = (0..n)
                        .filter(|i| !deficit.contains(i))
                        .map(|i| out[i])
                        .sum();
                    let scale = (1.0 - clamped_mass) / free_mass;
                    for i in 0..n {
                        if deficit.contains(&i) {
                            out[i] = bound;
                        } else {
                            out[i] *= scale;
                        }
                    }
                }
                CovarianceCandidate::new(out)
            }
        }
    }

    /// Whether a candidate lies in the model (used by tests and input
    /// validation).
    pub fn contains(&self, cand: &CovarianceCandidate, tol: f64) -> bool {
        let n = cand.tau_sq.len();
        match self {
            CovarianceModel::HetFull => true,
            CovarianceModel::Grouped { .. } => self.group_ranges(n).iter().all(|&(s, e)| {
                let first = cand.tau_sq[s];
                (s..e).all(|i| (cand.tau_sq[i] - first).abs() <= tol)
            }),
            CovarianceModel::BoundedBelow { tau_star_sq } => {
                cand.tau_sq.iter().all(|&t| t >= tau_star_sq - tol)
            }
        }
    }
}

/// A point of the heteroskedasticity model: strictly positive diagonal
/// entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCandidate {
    tau_sq: DVector<f64>,
}

impl CovarianceCandidate {
    pub fn new(tau_sq: DVector<f64>) -> Result<Self> {
        if tau_sq.is_empty() {
            return Err(Error::InvalidInput("empty covariance diagonal".into()));
        }
        if tau_sq.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidInput(
                "covariance diagonal entries must be strictly positive".into(),
            ));
        }
        let total: f64 = tau_sq.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "covariance diagonal must have unit trace, got {total}"
            )));
        }
        Ok(CovarianceCandidate { tau_sq })
    }

    /// Normalize an arbitrary positive vector to unit trace.
    pub fn from_unnormalized(raw: DVector<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput(
                "cannot normalize a nonpositive diagonal".into(),
            ));
        }
        CovarianceCandidate::new(raw / total)
    }

    /// The homoskedastic point `diag(1/n, ..., 1/n)`.
    pub fn homoskedastic(n: usize) -> Self {
        CovarianceCandidate {
            tau_sq: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    /// Near-degenerate candidate: weight `0.9999` on coordinate `i` and the
    /// remainder spread evenly.
    pub fn near_degenerate(n: usize, i: usize) -> Self {
        let rest = 0.0001 / (n as f64 - 1.0);
        CovarianceCandidate {
            tau_sq: DVector::from_fn(n, |j, _| if j == i { 0.9999 } else { rest }),
        }
    }

    pub fn tau_sq(&self) -> &DVector<f64> {
        &self.tau_sq
    }

    pub fn n(&self) -> usize {
        self.tau_sq.len()
    }

    /// Elementwise square root (the diagonal of `Sigma^{1/2}`).
    pub fn sqrt_diag(&self) -> DVector<f64> {
        self.tau_sq.map(f64::sqrt)
    }
}
