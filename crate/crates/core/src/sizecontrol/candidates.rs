//! Initial covariance candidates for the stage-0 scan.
//!
//! The pool combines uniform draws on the simplex (one quarter of the
//! random budget), squared-and-renormalized simplex draws (the remaining
//! three quarters, which concentrate mass and probe sparser diagonals),
//! the n near-degenerate diagonals with a 0.9999 dominant coordinate, the
//! homoskedastic point, and, when a reduction matrix is available, the
//! vertex maximizing the expectation of the quadratic form (its trace
//! objective is linear in the diagonal, so the maximum sits at a vertex;
//! the 0.9999-interior version of that vertex is used). Every candidate is
//! projected into the requested model.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;

use crate::covariance::{CovarianceCandidate, CovarianceModel};
use crate::model::TestingProblem;
use crate::rng::{stream_rng, Stream};

/// Draw a point from the uniform distribution on the unit simplex.
fn simplex_draw(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    let mut v = DVector::from_fn(n, |_, _| {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        -u.ln()
    });
    let total: f64 = v.iter().sum();
    v /= total;
    v
}

pub fn generate_candidates(
    problem: &TestingProblem,
    model: &CovarianceModel,
    a_matrix: Option<&DMatrix<f64>>,
    count: usize,
    seed: u64,
) -> Vec<CovarianceCandidate> {
    let n = problem.n();
    let mut rng = stream_rng(seed, Stream::CandidatePool);
    let uniform = (count / 4).saturating_sub(1);
    let squared = count.saturating_sub(uniform);

    let mut raw: Vec<DVector<f64>> = Vec::with_capacity(count + n + 2);
    for _ in 0..uniform {
        raw.push(simplex_draw(n, &mut rng));
    }
    for _ in 0..squared {
        let xi = simplex_draw(n, &mut rng);
        let sq = xi.map(|v| v * v);
        let total: f64 = sq.iter().sum();
        raw.push(sq / total);
    }
    for i in 0..n {
        raw.push(CovarianceCandidate::near_degenerate(n, i).tau_sq().clone());
    }
    raw.push(DVector::from_element(n, 1.0 / n as f64));
    if let Some(a) = a_matrix {
        let mut best = 0;
        for i in 1..n {
            if a[(i, i)] > a[(best, best)] {
                best = i;
            }
        }
        raw.push(CovarianceCandidate::near_degenerate(n, best).tau_sq().clone());
    }

    raw.into_iter()
        .filter_map(|t| model.project(&t).ok())
        .collect()
}
