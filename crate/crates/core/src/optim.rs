//! Derivative-free local maximization (Nelder-Mead).
//!
//! The covariance searches parameterize the feasible set through a softmax
//! over an unconstrained space, so a plain unconstrained simplex search is
//! all that is needed. Standard reflection/expansion/contraction/shrink
//! coefficients; convergence is declared when the function values across
//! the simplex agree to a relative tolerance, mirroring the usual
//! `reltol`-style stopping rule.

/// Budget and stopping rule for one local search. `max_iter` counts main
/// simplex iterations (reflection steps), matching the convention of the
/// usual `optim`-style implementations.
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Initial displacement added per coordinate to build the simplex.
    pub init_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            rel_tol: 1e-2,
            max_iter: 200,
            init_step: 1.0,
        }
    }
}

const ALPHA: f64 = 1.0; // reflection
const GAMMA: f64 = 2.0; // expansion
const RHO: f64 = 0.5; // contraction
const SIGMA: f64 = 0.5; // shrink

/// Maximize `f` from `x0`; returns the best point and value found.
pub fn maximize(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64) {
    let dim = x0.len();
    if dim == 0 {
        let v = f(x0);
        return (x0.to_vec(), v);
    }
    // Work with minimization internally.
    let mut g = |x: &[f64]| -f(x);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v0 = g(x0);
    simplex.push((x0.to_vec(), v0));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += opts.init_step;
        let v = g(&x);
        simplex.push((x, v));
    }

    for _ in 0..opts.max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= opts.rel_tol * (best.abs() + opts.rel_tol) {
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for (x, _) in simplex.iter().take(dim) {
            for (c, &xi) in centroid.iter_mut().zip(x) {
                *c += xi;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let worst_x = simplex[dim].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst_x)
            .map(|(&c, &w)| c + ALPHA * (c - w))
            .collect();
        let fr = g(&reflect);

        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst_x)
                .map(|(&c, &w)| c + GAMMA * (c - w))
                .collect();
            let fe = g(&expand);
            simplex[dim] = if fe < fr { (expand, fe) } else { (reflect, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
            continue;
        }
        // Contraction (outside if the reflected point improved on the
        // worst, inside otherwise).
        let towards = if fr < simplex[dim].1 {
            &reflect
        } else {
            &worst_x
        };
        let contract: Vec<f64> = centroid
            .iter()
            .zip(towards)
            .map(|(&c, &t)| c + RHO * (t - c))
            .collect();
        let fc = g(&contract);
        if fc < simplex[dim].1.min(fr) {
            simplex[dim] = (contract, fc);
            continue;
        }
        // Shrink towards the best vertex.
        let best_x = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best_x
                .iter()
                .zip(&vertex.0)
                .map(|(&b, &v)| b + SIGMA * (v - b))
                .collect();
            let fv = g(&x);
            *vertex = (x, fv);
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    let (x, v) = simplex.swap_remove(0);
    (x, -v)
}
