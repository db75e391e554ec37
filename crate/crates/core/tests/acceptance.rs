//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantities once its assertions hold. Budgets are
//! desk-scale; tolerance bands absorb the reduced searches.
//!
//! Run alone with `cargo test --test acceptance -- --nocapture`.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::ContinuousCDF;

use hrt_core::model::{location_problem, two_group_problem, TestingProblem};
use hrt_core::power::{power_curve, PowerCurve};
use hrt_core::qform::{reduction_matrix, spectrum, tail_prob_nonneg, QuadraticFormSpectrum};
use hrt_core::search::{hostile_search, HostileOptions};
use hrt_core::sizecontrol::{
    bootstrap_null_rejection, critical_value, size, BootstrapVariant, SearchParams,
};
use hrt_core::statistics::{evaluate, g_transform, StatisticFamily, StatisticSpec};
use hrt_core::{CovarianceCandidate, CovarianceModel, Error, CHI2_1_Q95};

const LIM: usize = 30_000;

fn desk_params() -> SearchParams {
    SearchParams::default()
}

fn reduced_params() -> SearchParams {
    SearchParams {
        pool: 4_000,
        stage1_starts: 30,
        ..SearchParams::default()
    }
}

/// Criterion 1: the inversion kernel reproduces the chi-square quantile
/// probability and matches a brute-force Monte Carlo oracle on random
/// quadratic forms within four standard errors.
#[test]
fn criterion_1_quadratic_form_kernel() {
    // (a) P(chi^2_1 >= 3.8415) = 0.05 +- 1e-3, encoded as the F-type form
    // chi^2_1 - (3.8415/m) chi^2_m >= 0 with m large.
    let m = 20_000;
    let mut lambdas = vec![1.0];
    let mut ncps = vec![0.0];
    for _ in 0..m {
        lambdas.push(-CHI2_1_Q95 / m as f64);
        ncps.push(0.0);
    }
    let s = QuadraticFormSpectrum::from_parts(lambdas, ncps).unwrap();
    let p = tail_prob_nonneg(&s, 1e-4, LIM).unwrap();
    assert!(
        (p - 0.05).abs() <= 1e-3,
        "chi-square quantile probability: {p}"
    );

    // (b) 50 seeded random (A, Sigma, nu) cases against a 1e6-draw Monte
    // Carlo oracle evaluated on the raw quadratic form (no eigen route).
    let n = 10;
    let draws = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_101);
    let mut checked = 0;
    for case in 0..50 {
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        a = (&a + a.transpose()) * 0.5;
        let sigma = CovarianceCandidate::from_unnormalized(DVector::from_fn(n, |_, _| {
            rng.gen::<f64>() + 0.05
        }))
        .unwrap();
        let nu = DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let spec = spectrum(&a, &sigma, Some(&nu)).unwrap();
        if spec.lambdas.iter().all(|&l| l > 0.0) || spec.lambdas.iter().all(|&l| l < 0.0) {
            continue;
        }
        let p = tail_prob_nonneg(&spec, 1e-4, LIM).unwrap();

        // Oracle: zeta ~ N(nu, I), form zeta' S A S zeta.
        let sd = sigma.sqrt_diag();
        let mut msas = a.clone();
        for i in 0..n {
            for j in 0..n {
                msas[(i, j)] *= sd[i] * sd[j];
            }
        }
        let mut hits = 0usize;
        let mut zeta = vec![0.0_f64; n];
        for _ in 0..draws {
            for (i, z) in zeta.iter_mut().enumerate() {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                *z = nu[i] + e;
            }
            let mut q = 0.0;
            for i in 0..n {
                let zi = zeta[i];
                for j in 0..n {
                    q += zi * msas[(i, j)] * zeta[j];
                }
            }
            if q >= 0.0 {
                hits += 1;
            }
        }
        let phat = hits as f64 / draws as f64;
        let se = (phat * (1.0 - phat) / draws as f64).sqrt().max(1e-6);
        assert!(
            (p - phat).abs() <= 4.0 * se + 1e-4,
            "case {case}: kernel {p} vs oracle {phat} (se {se})"
        );
        checked += 1;
    }
    assert!(checked >= 45, "only {checked} informative cases");
    println!(
        "[criterion 1] PASS: chi-square tail {p:.5}; {checked} random forms within 4 SE of a 1e6-draw oracle"
    );
}

/// Criterion 2: sign equivalence between statistic exceedances and the
/// reduction-matrix quadratic form, zero violations outside the boundary
/// band.
#[test]
fn criterion_2_sign_equivalence() {
    let fixtures: Vec<TestingProblem> = vec![
        two_group_problem(9, 4).unwrap(),
        hrt_core::model::intercept_slope_problem(&DVector::from_fn(8, |i, _| {
            (1.3 * i as f64).cos() + 0.4
        }))
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut comparisons = 0usize;
    for problem in &fixtures {
        let n = problem.n();
        for family in StatisticFamily::ALL {
            let spec = StatisticSpec::new(problem, family);
            for &c in &[0.25, 1.0, 2.5, 5.0, 9.0] {
                let rm = match reduction_matrix(problem, &spec, c) {
                    Ok(rm) => rm,
                    Err(Error::DegenerateReduction { .. }) => continue,
                    Err(e) => panic!("{e}"),
                };
                let a_norm = rm.a.norm();
                for _ in 0..1_000 {
                    let z = DVector::from_fn(n, |_, _| {
                        rng.sample::<f64, _>(rand_distr::StandardNormal)
                    });
                    let y = problem.mu0() + &z;
                    let t = evaluate(problem, &spec, &y).unwrap();
                    if t.degenerate {
                        continue;
                    }
                    let form = (z.transpose() * &rm.a * &z)[(0, 0)];
                    if form.abs() <= 1e-9 * z.norm_squared() * a_norm {
                        continue;
                    }
                    assert_eq!(
                        t.value >= c,
                        form >= 0.0,
                        "{family} at c = {c}: T = {}, form = {form}",
                        t.value
                    );
                    comparisons += 1;
                }
            }
        }
    }
    println!("[criterion 2] PASS: {comparisons} sign comparisons, zero violations");
}

/// Criterion 3: the smallest size-controlling critical value of the
/// classical statistic in the location model equals the F quantile.
#[test]
fn criterion_3_location_model_critical_value() {
    let n = 10;
    let problem = location_problem(n, 0.0).unwrap();
    let spec = StatisticSpec::new(&problem, StatisticFamily::Uc);
    let report = critical_value(
        &problem,
        &spec,
        0.05,
        &CovarianceModel::HetFull,
        &desk_params(),
        31,
    )
    .unwrap();
    let f = statrs::distribution::FisherSnedecor::new(1.0, (n - 1) as f64).unwrap();
    let target = f.inverse_cdf(0.95);
    assert!(report.converged);
    assert!(
        (report.c - target).abs() <= 0.05,
        "critical value {} vs F quantile {target}",
        report.c
    );
    println!(
        "[criterion 3] PASS: location-model UC critical value {:.4} vs F(1,9) quantile {target:.4}",
        report.c
    );
}

/// Criterion 4: two-group comparison at n = 30 with HC2: critical values
/// match the known exact values on the t scale within 0.15.
#[test]
fn criterion_4_two_group_hc2_critical_values() {
    let exact: [(usize, f64); 3] = [(3, 18.51), (9, 5.32), (15, 4.60)];
    let mut found = Vec::new();
    for (n1, target) in exact {
        let problem = two_group_problem(30, n1).unwrap();
        let spec = StatisticSpec::new(&problem, StatisticFamily::Hc2);
        let report = critical_value(
            &problem,
            &spec,
            0.05,
            &CovarianceModel::HetFull,
            &desk_params(),
            40 + n1 as u64,
        )
        .unwrap();
        let diff = (report.c.sqrt() - target.sqrt()).abs();
        assert!(
            diff <= 0.15,
            "n1 = {n1}: critical value {} vs exact {target} (t-scale diff {diff:.3})",
            report.c
        );
        found.push((n1, report.c, diff));
    }
    println!(
        "[criterion 4] PASS: HC2 critical values {:?} (t-scale diffs {:.3}, {:.3}, {:.3})",
        found.iter().map(|f| (f.0, f.1)).collect::<Vec<_>>(),
        found[0].2,
        found[1].2,
        found[2].2
    );
}

/// Criterion 5: equivalence identities on the two-group fixtures: the
/// HC1/HC0 critical-value ratio, the UCR = g(UC) link, and the pointwise
/// coincidence of all feasible power curves in the balanced case.
#[test]
fn criterion_5_equivalence_identities() {
    let alpha = 0.05;
    // (a) HC1/HC0 ratio and (b) UCR vs g(UC), moderately unbalanced case.
    // Fourteen critical values are computed here; criterion 4 shows the
    // search has a wide quality margin, so a lighter pool keeps the
    // runtime down without endangering the bands.
    let problem = two_group_problem(30, 9).unwrap();
    let params = SearchParams {
        eps: 5e-4,
        pool: 6_000,
        stage1_starts: 40,
        ..desk_params()
    };
    let cv = |family: StatisticFamily, seed: u64| {
        let spec = StatisticSpec::new(&problem, family);
        critical_value(&problem, &spec, alpha, &CovarianceModel::HetFull, &params, seed)
            .unwrap()
            .c
    };
    let c_hc0 = cv(StatisticFamily::Hc0, 50);
    let c_hc1 = cv(StatisticFamily::Hc1, 50);
    let ratio = c_hc1 / c_hc0;
    let theoretical = (30.0 - 2.0) / 30.0;
    assert!(
        (ratio / theoretical - 1.0).abs() <= 0.05,
        "HC1/HC0 ratio {ratio} vs {theoretical}"
    );

    let c_uc = cv(StatisticFamily::Uc, 51);
    let c_ucr = cv(StatisticFamily::Ucr, 51);
    let g_of_uc = g_transform(&problem, c_uc);
    assert!(
        (c_ucr - g_of_uc).abs() <= 0.1,
        "UCR {c_ucr} vs g(UC) = {g_of_uc}"
    );

    // (c) Balanced case: all twelve tests coincide, so their power curves
    // (each at its own smallest size-controlling critical value) agree to
    // 0.01 pointwise.
    let balanced = two_group_problem(30, 15).unwrap();
    let grid: Vec<f64> = (0..31).map(|i| i as f64 * 0.2).collect();
    let homoskedastic = CovarianceCandidate::homoskedastic(30);
    let unbalanced_sigma = CovarianceCandidate::from_unnormalized(DVector::from_fn(30, |i, _| {
        if i < 15 {
            0.1 / 15.0
        } else {
            0.9 / 15.0
        }
    }))
    .unwrap();
    for sigma in [&homoskedastic, &unbalanced_sigma] {
        let mut curves: Vec<PowerCurve> = Vec::new();
        for family in StatisticFamily::ALL {
            let spec = StatisticSpec::new(&balanced, family);
            let c = critical_value(
                &balanced,
                &spec,
                alpha,
                &CovarianceModel::HetFull,
                &params,
                52,
            )
            .unwrap()
            .c;
            curves.push(power_curve(&balanced, &spec, c, sigma, &grid, &params, 1).unwrap());
        }
        let mut max_spread = 0.0_f64;
        for point in 0..grid.len() {
            let vals: Vec<f64> = curves.iter().map(|cu| cu.power[point]).collect();
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            max_spread = max_spread.max(hi - lo);
        }
        assert!(
            max_spread <= 0.01,
            "balanced power curves spread {max_spread}"
        );
    }
    println!(
        "[criterion 5] PASS: HC1/HC0 ratio {ratio:.4} (theory {theoretical:.4}); \
         |UCR - g(UC)| = {:.4}; balanced curves coincide to 0.01",
        (c_ucr - g_of_uc).abs()
    );
}

/// Criterion 6: the bounded n = 3 example: statistic values, the lower
/// bound, and the critical value land in the proven band [1.8, 2.0).
#[test]
fn criterion_6_bounded_example() {
    let mut x2 = DVector::zeros(3);
    x2[0] = 1.0;
    x2[1] = -1.0;
    let problem = hrt_core::model::intercept_slope_problem(&x2).unwrap();
    let spec = StatisticSpec::new(&problem, StatisticFamily::Hc0r);

    let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let v1 = evaluate(&problem, &spec, &e1).unwrap().value;
    assert!((v1 - 1.8).abs() <= 1e-10, "T(e1) = {v1}");
    let sup = evaluate(&problem, &spec, &x2).unwrap().value;
    assert!((sup - 2.0).abs() <= 1e-10, "sup value = {sup}");

    let cs = hrt_core::feasibility::c_star(&problem, &spec).unwrap();
    assert!((cs - 1.8).abs() <= 1e-10, "C* = {cs}");

    let report = critical_value(
        &problem,
        &spec,
        0.05,
        &CovarianceModel::HetFull,
        &desk_params(),
        60,
    )
    .unwrap();
    assert!(
        report.c >= 1.8 - 1e-9 && report.c < 2.0,
        "critical value {} outside [1.8, 2.0)",
        report.c
    );
    println!(
        "[criterion 6] PASS: T(e1) = {v1:.10}, sup = {sup:.10}, C* = {cs:.10}, critval = {:.6}",
        report.c
    );
}

/// Criterion 7: hostile search at n = 25: the classical and lightly
/// weighted statistics admit designs with C* above the chi-square
/// quantile (size one), and every statistic shows worst-case size at
/// least 0.08 at that quantile on the found designs.
#[test]
fn criterion_7_hostile_designs() {
    let n = 25;
    let alpha = 0.05;
    let runs = 15u64;
    let must_exceed = [
        StatisticFamily::Uc,
        StatisticFamily::Hc0,
        StatisticFamily::Hc1,
        StatisticFamily::Hc2,
    ];
    let options = HostileOptions {
        params: reduced_params(),
        ..HostileOptions::default()
    };
    let mut summary = Vec::new();
    for family in StatisticFamily::ALL {
        let mut best_c_star = 0.0_f64;
        let mut worst_size = 0.0_f64;
        for run in 0..runs {
            let res = hostile_search(n, family, alpha, 1000 + run, &options).unwrap();
            best_c_star = best_c_star.max(res.c_star);
            worst_size = worst_size.max(res.sizes_at_conventional.chi2_quantile);
            if best_c_star > CHI2_1_Q95 && worst_size >= 0.08 {
                break;
            }
        }
        if must_exceed.contains(&family) {
            assert!(
                best_c_star > CHI2_1_Q95,
                "{family}: best C* over {runs} runs is {best_c_star}"
            );
        }
        assert!(
            worst_size >= 0.08,
            "{family}: worst size at the chi-square quantile is {worst_size}"
        );
        summary.push((family.label(), best_c_star, worst_size));
    }
    println!("[criterion 7] PASS: per-statistic (best C*, worst size at 3.8415):");
    for (label, cs, sz) in summary {
        println!("    {label:>5}: C* = {cs:>9.2}, size = {sz:.3}");
    }
}

/// Criterion 8: null rejection rates of the parametric-bootstrap baseline
/// reproduce the reference values on the two-group and high-leverage
/// designs.
#[test]
fn criterion_8_bootstrap_baselines() {
    let params = desk_params();
    let reps = params.mc_reps;

    // Two-group n = 30, n1 = 3, covariance with 30% of the variance mass
    // in the small group, variant C with HC0: 0.14 +- 0.02.
    let problem = two_group_problem(30, 3).unwrap();
    let spec = StatisticSpec::new(&problem, StatisticFamily::Hc0);
    let sigma3 = CovarianceCandidate::new(DVector::from_fn(30, |i, _| {
        if i < 3 {
            0.1 * 3.0 / 3.0
        } else {
            0.1 * 7.0 / 27.0
        }
    }))
    .unwrap();
    let rate_two_group = bootstrap_null_rejection(
        &problem,
        &spec,
        BootstrapVariant::C,
        &sigma3,
        0.05,
        reps,
        70,
        None,
        &params,
    )
    .unwrap();
    assert!(
        (rate_two_group - 0.14).abs() <= 0.02,
        "two-group bootstrap rate {rate_two_group}"
    );

    // High-leverage design with a dominant first coordinate, covariance
    // concentrating there, variant C with HC0: 0.65 +- 0.03.
    let x2 = DVector::from_fn(30, |i, _| {
        if i == 0 {
            10.0
        } else {
            ((i + 1) as f64).cos()
        }
    });
    let problem = hrt_core::model::intercept_slope_problem(&x2).unwrap();
    let spec = StatisticSpec::new(&problem, StatisticFamily::Hc0);
    let sigma1 = CovarianceCandidate::new(DVector::from_fn(30, |i, _| {
        if i == 0 {
            8.0 / 30.0
        } else {
            (30.0 - 8.0) / 29.0 / 30.0
        }
    }))
    .unwrap();
    let rate_leverage = bootstrap_null_rejection(
        &problem,
        &spec,
        BootstrapVariant::C,
        &sigma1,
        0.05,
        reps,
        71,
        None,
        &params,
    )
    .unwrap();
    assert!(
        (rate_leverage - 0.65).abs() <= 0.03,
        "high-leverage bootstrap rate {rate_leverage}"
    );
    println!(
        "[criterion 8] PASS: bootstrap null rejection {rate_two_group:.3} (target 0.14 +- 0.02), \
         {rate_leverage:.3} (target 0.65 +- 0.03) at {reps} reps"
    );
}

/// Criterion 9 lives in tests/properties.rs as a standalone suite; this
/// entry just points there so the acceptance log is complete.
#[test]
fn criterion_9_property_suites_pointer() {
    println!(
        "[criterion 9] see `cargo test --test properties` (runs in this workspace test pass)"
    );
}

/// The worst-case sizes of the size() search must certify the known
/// hostile instances: at the chi-square quantile the n = 25 searched
/// designs give sizes near one for the unweighted statistics (covered in
/// criterion 7) and, complementarily, the two-group fixture has size
/// far above alpha at the conventional value.
#[test]
fn conventional_value_oversizes_two_group() {
    let problem = two_group_problem(30, 3).unwrap();
    let spec = StatisticSpec::new(&problem, StatisticFamily::Hc2);
    let report = size(
        &problem,
        &spec,
        CHI2_1_Q95,
        &CovarianceModel::HetFull,
        &reduced_params(),
        5,
    )
    .unwrap();
    assert!(
        report.size > 0.20,
        "two-group size at the conventional value: {}",
        report.size
    );
}
