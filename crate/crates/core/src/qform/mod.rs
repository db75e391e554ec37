//! Exact-probability kernel for scalar restrictions.
//!
//! For q = 1 every rejection event `{T(mu0 + z) >= c}` coincides, off a
//! Lebesgue-null exceptional set, with `{z' A_c z >= 0}` for a symmetric
//! matrix `A_c` built from `v = X (X'X)^{-1} R'`. Under `z ~ N(mu - mu0,
//! sigma^2 Sigma)` the form becomes a weighted sum of independent
//! noncentral chi-squares whose tail probability at zero is computed by
//! numerical inversion of its characteristic function.

mod imhof;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceCandidate;
use crate::model::TestingProblem;
use crate::statistics::{StatisticFamily, StatisticSpec};
use crate::{Error, Result};

/// Tag naming the null set where the sign equivalence may fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExceptionalSet {
    /// `span(X)` (classical unrestricted statistic).
    SpanX,
    /// The singularity locus of the unrestricted HC covariance estimator.
    BSet,
    /// The null mean set `M0` (classical restricted statistic).
    M0,
    /// The singularity locus of the restricted HC covariance estimator.
    BTildeSet,
}

/// Symmetric matrix encoding `{T(mu0 + z) >= c}` as `{z' A z >= 0}`.
#[derive(Debug, Clone)]
pub struct ReductionMatrix {
    pub a: DMatrix<f64>,
    pub family: StatisticFamily,
    pub c: f64,
    pub exceptional_set: ExceptionalSet,
}

/// The critical value at which the restricted-HC reduction matrix can
/// degenerate to zero: `C0 = sum v_i^2 / sum v_i^4 d~_i`. The statistic is
/// constant off its exceptional set exactly when the matrix vanishes there.
pub fn c_zero(problem: &TestingProblem, spec: &StatisticSpec) -> Result<f64> {
    if problem.q() != 1 {
        return Err(Error::NotScalarRestriction { q: problem.q() });
    }
    if !(spec.family.is_restricted() && spec.family.is_robust()) {
        return Err(Error::InvalidInput(
            "C0 is defined for the restricted HC families".into(),
        ));
    }
    let v = problem
        .geometry()
        .v
        .as_ref()
        .expect("q = 1 problems carry v");
    let num: f64 = v.iter().map(|&vi| vi * vi).sum();
    let den: f64 = v
        .iter()
        .zip(spec.weights.iter())
        .map(|(&vi, &d)| vi.powi(4) * d)
        .sum();
    Ok(num / den)
}

/// Build the reduction matrix of a statistic at critical value `c`.
///
/// Fails with [`Error::DegenerateReduction`] when the restricted-HC matrix
/// vanishes at this `c` (constant statistic), and with
/// [`Error::NotScalarRestriction`] when `q > 1`.
pub fn reduction_matrix(
    problem: &TestingProblem,
    spec: &StatisticSpec,
    c: f64,
) -> Result<ReductionMatrix> {
    if problem.q() != 1 {
        return Err(Error::NotScalarRestriction { q: problem.q() });
    }
    let g = problem.geometry();
    let v = g.v.as_ref().expect("q = 1 problems carry v");
    let n = problem.n();
    let nf = n as f64;
    let k = problem.k() as f64;
    let vvt = v * v.transpose();

    let (correction, exceptional_set): (DMatrix<f64>, _) = match spec.family {
        StatisticFamily::Uc => {
            let scale = v.norm_squared() / (nf - k);
            (&g.proj_resid * scale, ExceptionalSet::SpanX)
        }
        StatisticFamily::Ucr => {
            let scale = v.norm_squared() / (nf - (k - 1.0));
            (&g.proj_m0lin_perp * scale, ExceptionalSet::M0)
        }
        f if !f.is_restricted() => {
            let d = weighted_diag(v, &spec.weights);
            (
                &g.proj_resid * d * &g.proj_resid,
                ExceptionalSet::BSet,
            )
        }
        _ => {
            let d = weighted_diag(v, &spec.weights);
            (
                &g.proj_m0lin_perp * d * &g.proj_m0lin_perp,
                ExceptionalSet::BTildeSet,
            )
        }
    };

    let mut a = vvt - correction * c;
    // Enforce exact symmetry; the eigensolver assumes it.
    a = (&a + a.transpose()) * 0.5;

    if spec.family.is_restricted() && spec.family.is_robust() {
        let scale = v.norm_squared().powi(2) + c.abs() * correction_norm(&a, v, c);
        if a.norm() <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateReduction { c });
        }
    }

    Ok(ReductionMatrix {
        a,
        family: spec.family,
        c,
        exceptional_set,
    })
}

fn weighted_diag(v: &DVector<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        v.len(),
        v.iter().zip(weights.iter()).map(|(&vi, &d)| vi * vi * d),
    ))
}

fn correction_norm(a: &DMatrix<f64>, v: &DVector<f64>, c: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    // ||correction|| recovered from A = vv' - c * correction.
    ((v * v.transpose()) - a).norm() / c.abs()
}

/// Eigenvalues and noncentrality parameters of
/// `zeta' Sigma^{1/2} A Sigma^{1/2} zeta` with `zeta ~ N(nu, I)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticFormSpectrum {
    /// Nonzero eigenvalues of `Sigma^{1/2} A Sigma^{1/2}`, descending.
    pub lambdas: Vec<f64>,
    /// Noncentrality parameters `delta_j^2 = (q_j' nu)^2` of the matching
    /// chi-square components.
    pub ncps: Vec<f64>,
}

impl QuadraticFormSpectrum {
    /// Directly wrap raw weights and noncentralities (used by the
    /// noncentral-F reduction and by tests).
    pub fn from_parts(lambdas: Vec<f64>, ncps: Vec<f64>) -> Result<Self> {
        if lambdas.len() != ncps.len() {
            return Err(Error::DimensionMismatch(
                "lambdas and ncps must have equal length".into(),
            ));
        }
        if ncps.iter().any(|&d| d < 0.0) {
            return Err(Error::InvalidInput(
                "noncentrality parameters must be nonnegative".into(),
            ));
        }
        Ok(QuadraticFormSpectrum { lambdas, ncps })
    }
}

/// Relative threshold below which eigenvalues are dropped from the form.
const EIGENVALUE_DROP: f64 = 1e-12;

/// Spectral data of `Sigma^{1/2} A Sigma^{1/2}` under mean shift `nu`
/// (pass `None` under the null). `Sigma` is diagonal, so its square root
/// is the elementwise square root.
pub fn spectrum(
    a: &DMatrix<f64>,
    sigma: &CovarianceCandidate,
    nu: Option<&DVector<f64>>,
) -> Result<QuadraticFormSpectrum> {
    let n = a.nrows();
    if sigma.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "covariance has dimension {}, matrix has {n}",
            sigma.n()
        )));
    }
    if let Some(nu) = nu {
        if nu.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mean shift has length {}, expected {n}",
                nu.len()
            )));
        }
    }
    let s = sigma.sqrt_diag();
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= s[i] * s[j];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |acc, &e| acc.max(e.abs()));
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > EIGENVALUE_DROP * max_abs {
            let delta = match nu {
                Some(nu) => {
                    let proj = eig.eigenvectors.column(j).dot(nu);
                    proj * proj
                }
                None => 0.0,
            };
            pairs.push((lam, delta));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (lambdas, ncps) = pairs.into_iter().unzip();
    Ok(QuadraticFormSpectrum { lambdas, ncps })
}

/// `P(sum_j lambda_j chi^2_1(delta_j^2) >= 0)` with absolute error target
/// `acc`, using at most `limit` integrand evaluations.
///
/// When every retained eigenvalue has the same sign the probability is 0
/// or 1 without integration. Fails with [`Error::AccuracyNotReached`]
/// (carrying the best estimate) if the budget is too small for the target.
pub fn tail_prob_nonneg(spectrum: &QuadraticFormSpectrum, acc: f64, limit: usize) -> Result<f64> {
    if spectrum.lambdas.is_empty() {
        return Err(Error::InvalidInput(
            "spectrum has no nonzero eigenvalues".into(),
        ));
    }
    if !(acc > 0.0) {
        return Err(Error::InvalidInput("accuracy must be positive".into()));
    }
    if spectrum.lambdas.iter().all(|&l| l > 0.0) {
        return Ok(1.0);
    }
    if spectrum.lambdas.iter().all(|&l| l < 0.0) {
        return Ok(0.0);
    }
    imhof::tail_prob_nonneg(&spectrum.lambdas, &spectrum.ncps, acc, limit)
}

/// Upper tail `P(F >= x)` of a (noncentral) F distribution with `d1`, `d2`
/// degrees of freedom and noncentrality `ncp`, by reusing the quadratic
/// form kernel on `chi^2_{d1}(ncp) - (x d1 / d2) chi^2_{d2} >= 0`.
pub fn noncentral_f_tail(
    d1: usize,
    d2: usize,
    ncp: f64,
    x: f64,
    acc: f64,
    limit: usize,
) -> Result<f64> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidInput(
            "degrees of freedom must be positive".into(),
        ));
    }
    if ncp < 0.0 {
        return Err(Error::InvalidInput(
            "noncentrality must be nonnegative".into(),
        ));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    let mut lambdas = Vec::with_capacity(d1 + d2);
    let mut ncps = Vec::with_capacity(d1 + d2);
    // Noncentral chi-square splits into one noncentral unit-weight
    // component carrying the whole ncp plus central ones.
    for j in 0..d1 {
        lambdas.push(1.0);
        ncps.push(if j == 0 { ncp } else { 0.0 });
    }
    let neg = -x * d1 as f64 / d2 as f64;
    for _ in 0..d2 {
        lambdas.push(neg);
        ncps.push(0.0);
    }
    tail_prob_nonneg(&QuadraticFormSpectrum { lambdas, ncps }, acc, limit)
}

/// `p`-quantile of the central F distribution with `d1`, `d2` degrees of
/// freedom, found by bisection on [`noncentral_f_tail`].
pub fn f_quantile(d1: usize, d2: usize, p: f64, acc: f64, limit: usize) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidInput("quantile level must be in (0,1)".into()));
    }
    let tail = 1.0 - p;
    let mut hi = 1.0;
    while noncentral_f_tail(d1, d2, 0.0, hi, acc, limit)? > tail {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidInput("quantile bracketing failed".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if noncentral_f_tail(d1, d2, 0.0, mid, acc, limit)? > tail {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{location_problem, two_group_problem};
    use crate::statistics::{evaluate, StatisticSpec};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::ContinuousCDF;

    const LIM: usize = 30_000;

    #[test]
    fn trivial_tails() {
        let s = QuadraticFormSpectrum::from_parts(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(tail_prob_nonneg(&s, 1e-4, LIM).unwrap(), 1.0);
        let s = QuadraticFormSpectrum::from_parts(vec![-0.3, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(tail_prob_nonneg(&s, 1e-4, LIM).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_pair_gives_half() {
        let s = QuadraticFormSpectrum::from_parts(vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let p = tail_prob_nonneg(&s, 1e-6, LIM).unwrap();
        assert_relative_eq!(p, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn chi_square_quantile_recovered() {
        // chi^2_1 - x * chi^2_m / m >= 0 approximates P(chi^2_1 >= x) for
        // large m; at the 95% quantile this is 0.05.
        let m = 20_000;
        let mut lambdas = vec![1.0];
        let mut ncps = vec![0.0];
        for _ in 0..m {
            lambdas.push(-crate::CHI2_1_Q95 / m as f64);
            ncps.push(0.0);
        }
        let s = QuadraticFormSpectrum::from_parts(lambdas, ncps).unwrap();
        let p = tail_prob_nonneg(&s, 1e-4, LIM).unwrap();
        assert_relative_eq!(p, 0.05, epsilon = 1e-3);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = 6;
            let lambdas: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            if lambdas.iter().all(|&l| l > 0.0) || lambdas.iter().all(|&l| l < 0.0) {
                continue;
            }
            let ncps: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let s = QuadraticFormSpectrum::from_parts(lambdas.clone(), ncps.clone()).unwrap();
            let t = rng.gen::<f64>() * 10.0 + 0.01;
            let scaled: Vec<f64> = lambdas.iter().map(|&l| l * t).collect();
            let s2 = QuadraticFormSpectrum::from_parts(scaled, ncps).unwrap();
            let p1 = tail_prob_nonneg(&s, 1e-6, LIM).unwrap();
            let p2 = tail_prob_nonneg(&s2, 1e-6, LIM).unwrap();
            assert_relative_eq!(p1, p2, epsilon = 5e-6);
        }
    }

    #[test]
    fn monte_carlo_agreement_random_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 200_000;
        for _ in 0..5 {
            let m = 5;
            let lambdas: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            if lambdas.iter().all(|&l| l > 0.0) || lambdas.iter().all(|&l| l < 0.0) {
                continue;
            }
            let deltas: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 1.5).collect();
            let ncps: Vec<f64> = deltas.iter().map(|&d| d * d).collect();
            let s = QuadraticFormSpectrum::from_parts(lambdas.clone(), ncps).unwrap();
            let p = tail_prob_nonneg(&s, 1e-4, LIM).unwrap();

            let mut hits = 0usize;
            for _ in 0..draws {
                let q: f64 = lambdas
                    .iter()
                    .zip(deltas.iter())
                    .map(|(&l, &d)| {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        l * (z + d) * (z + d)
                    })
                    .sum();
                if q >= 0.0 {
                    hits += 1;
                }
            }
            let phat = hits as f64 / draws as f64;
            let se = (phat * (1.0 - phat) / draws as f64).sqrt().max(1e-6);
            assert!(
                (p - phat).abs() <= 4.0 * se + 1e-4,
                "p = {p}, MC = {phat}, se = {se}"
            );
        }
    }

    #[test]
    fn noncentral_f_matches_statrs_central_case() {
        for (d1, d2) in [(1usize, 9usize), (1, 29), (3, 12)] {
            let f = statrs::distribution::FisherSnedecor::new(d1 as f64, d2 as f64).unwrap();
            for x in [0.5, 1.0, 2.5, 4.0] {
                let ours = noncentral_f_tail(d1, d2, 0.0, x, 1e-5, LIM).unwrap();
                let reference = 1.0 - f.cdf(x);
                assert_relative_eq!(ours, reference, epsilon = 5e-5);
            }
        }
    }

    #[test]
    fn f_quantile_matches_statrs() {
        for (d1, d2, p) in [(1usize, 9usize, 0.95), (1, 28, 0.95), (1, 23, 0.99)] {
            let f = statrs::distribution::FisherSnedecor::new(d1 as f64, d2 as f64).unwrap();
            let reference = f.inverse_cdf(p);
            let ours = f_quantile(d1, d2, p, 1e-6, LIM).unwrap();
            assert_relative_eq!(ours, reference, epsilon = 1e-3, max_relative = 1e-3);
        }
    }

    #[test]
    fn x_zero_is_certain() {
        assert_eq!(noncentral_f_tail(1, 10, 0.0, 0.0, 1e-4, LIM).unwrap(), 1.0);
        assert_eq!(noncentral_f_tail(2, 7, 3.0, -1.0, 1e-4, LIM).unwrap(), 1.0);
    }

    #[test]
    fn reduction_at_zero_critical_value_is_psd() {
        let p = two_group_problem(8, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc0);
        let rm = reduction_matrix(&p, &spec, 0.0).unwrap();
        let sig = CovarianceCandidate::homoskedastic(8);
        let s = spectrum(&rm.a, &sig, None).unwrap();
        assert!(s.lambdas.iter().all(|&l| l > 0.0));
        assert_eq!(tail_prob_nonneg(&s, 1e-4, LIM).unwrap(), 1.0);
    }

    #[test]
    fn uc_reduction_matches_formula() {
        let p = two_group_problem(7, 3).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Uc);
        let c = 2.3;
        let rm = reduction_matrix(&p, &spec, c).unwrap();
        let g = p.geometry();
        let v = g.v.as_ref().unwrap();
        let expected = v * v.transpose() - &g.proj_resid * (c * v.norm_squared() / 5.0);
        assert!((rm.a - expected).norm() < 1e-12);
    }

    #[test]
    fn sign_equivalence_on_random_draws() {
        let p = two_group_problem(9, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for fam in StatisticFamily::ALL {
            let spec = StatisticSpec::new(&p, fam);
            for &c in &[0.5, 2.0, 5.0] {
                let rm = match reduction_matrix(&p, &spec, c) {
                    Ok(rm) => rm,
                    Err(Error::DegenerateReduction { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                for _ in 0..60 {
                    let z = nalgebra::DVector::from_fn(9, |_, _| {
                        rng.sample::<f64, _>(rand_distr::StandardNormal)
                    });
                    let y = p.mu0() + &z;
                    let t = evaluate(&p, &spec, &y).unwrap();
                    if t.degenerate {
                        continue;
                    }
                    let form = (z.transpose() * &rm.a * &z)[(0, 0)];
                    let band = 1e-9 * z.norm_squared() * rm.a.norm();
                    if form.abs() <= band || (t.value - c).abs() <= 1e-9 * c.max(1.0) {
                        continue;
                    }
                    assert_eq!(
                        t.value >= c,
                        form >= 0.0,
                        "{fam} at c = {c}: T = {}, form = {form}",
                        t.value
                    );
                }
            }
        }
    }

    #[test]
    fn location_n2_reduction_zero_set_is_level_set() {
        // n = 2 location model, HC0: T(z) = 8 zbar^2 / (z1 - z2)^2, so
        // {T = 2} = {z1 z2 = 0}. The reduction matrix at c = 2 must vanish
        // exactly there: its quadratic form is proportional to z1 z2.
        let p = location_problem(2, 0.0).unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc0);
        let rm = reduction_matrix(&p, &spec, 2.0).unwrap();
        assert!(rm.a[(0, 0)].abs() < 1e-14);
        assert!(rm.a[(1, 1)].abs() < 1e-14);
        assert!(rm.a[(0, 1)].abs() > 0.1);
        // On the axes the statistic equals 2 and the form vanishes.
        let e1 = nalgebra::DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(evaluate(&p, &spec, &e1).unwrap().value, 2.0, epsilon = 1e-12);
        assert!((e1.transpose() * &rm.a * &e1)[(0, 0)].abs() < 1e-14);
        // Off the axes the sign equivalence is strict.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let z = nalgebra::DVector::from_fn(2, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
            let form = (z.transpose() * &rm.a * &z)[(0, 0)];
            let t = evaluate(&p, &spec, &z).unwrap().value;
            if form.abs() > 1e-10 {
                assert_eq!(t >= 2.0, form >= 0.0);
            }
        }
    }

    #[test]
    fn c_zero_flags_constant_statistic() {
        // Regressor e1, R = 1: the restricted HC0R statistic equals 1 off
        // its exceptional set, so the reduction degenerates at C0 = 1.
        let n = 5;
        let x = DMatrix::from_fn(n, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let p = TestingProblem::build(
            x,
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let spec = StatisticSpec::new(&p, StatisticFamily::Hc0r);
        let c0 = c_zero(&p, &spec).unwrap();
        assert_relative_eq!(c0, 1.0, epsilon = 1e-12);
        assert!(matches!(
            reduction_matrix(&p, &spec, c0),
            Err(Error::DegenerateReduction { .. })
        ));
    }

    #[test]
    fn spectrum_of_identity_form() {
        let n = 4;
        let a = DMatrix::identity(n, n);
        let sig = CovarianceCandidate::homoskedastic(n);
        let s = spectrum(&a, &sig, None).unwrap();
        assert_eq!(s.lambdas.len(), n);
        for &l in &s.lambdas {
            assert_relative_eq!(l, 0.25, epsilon = 1e-12);
        }
        assert!(s.ncps.iter().all(|&d| d == 0.0));
    }

    use crate::model::TestingProblem;
}
