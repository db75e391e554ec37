//! `hrt`: worst-case size control for heteroskedasticity-robust tests.
//!
//! Subcommands mirror the library capabilities: `check` (feasibility for
//! all twelve statistics), `size`, `critval`, `pvalue`, `power`,
//! `hostile`, and `bootstrap-eval`. Each run reads one JSON config
//! (validated strictly; see `hrt schema`), writes machine-readable
//! artifacts into the output directory, and prints a one-line summary.
//!
//! Exit codes: 0 success; 2 validation failure; 3 the computation ran but
//! did not meet its convergence/accuracy contract (artifacts are still
//! written, with warnings).

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{read_vector_csv, CritvalMethod, RunConfig};
use hrt_core::power::{oracle_power_curve, power_curve};
use hrt_core::search::{hostile_search, HostileOptions};
use hrt_core::sizecontrol::{
    self, bootstrap_null_rejection, bootstrap_reject, BootstrapVariant,
};
use hrt_core::statistics::StatisticSpec;
use hrt_core::{feasibility, CovarianceCandidate, Error as CoreError};

#[derive(Parser)]
#[command(
    name = "hrt",
    about = "Valid heteroskedasticity-robust testing: worst-case sizes, smallest size-controlling critical values, maximal p-values, power curves",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Feasibility verdicts and lower bounds C* for all twelve statistics.
    Check,
    /// Worst-case size of {T >= c} for the configured critical value.
    Size,
    /// Smallest size-controlling critical value.
    Critval,
    /// Maximal p-value of an observed data vector.
    Pvalue,
    /// Power curves of the configured test plus the oracle benchmark.
    Power,
    /// Search for a hostile design maximizing the lower bound C*.
    Hostile,
    /// Null-rejection rate of the parametric-bootstrap baselines (or a
    /// single decision when y_path is given).
    BootstrapEval,
    /// Print the JSON schema of the run configuration.
    Schema,
}

enum RunError {
    /// Bad input: config, files, dimensions, infeasible request.
    Validation(String),
    /// The run produced output but missed a convergence/accuracy target.
    Partial(String),
    /// Unexpected failure.
    Other(String),
}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        RunError::Validation(format!("{e:#}"))
    }
}

/// Output-side failures are internal, not validation problems.
fn io<T>(r: anyhow::Result<T>) -> Result<T, RunError> {
    r.map_err(|e| RunError::Other(format!("{e:#}")))
}

fn classify_core(e: CoreError) -> RunError {
    match e {
        CoreError::NotConverged { .. } | CoreError::AccuracyNotReached { .. } => {
            RunError::Partial(e.to_string())
        }
        CoreError::RankDeficient { .. }
        | CoreError::DimensionMismatch(_)
        | CoreError::InvalidInput(_)
        | CoreError::InfeasibleModel(_)
        | CoreError::FeasibilityRefused(_)
        | CoreError::NotScalarRestriction { .. }
        | CoreError::AssumptionViolated(_)
        | CoreError::PluginMissing => RunError::Validation(e.to_string()),
        CoreError::DegenerateReduction { .. } => RunError::Validation(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(RunError::Partial(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(3)
        }
        Err(RunError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| RunError::Validation("--config is required".into()))?;
    Ok(RunConfig::load(path)?)
}

fn run(cli: &Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Schema => {
            use std::io::Write;
            // Tolerate a closed pipe (e.g. piping into `head`).
            let _ = std::io::stdout().write_all(config::CONFIG_SCHEMA.as_bytes());
            Ok(())
        }
        Command::Check => cmd_check(cli),
        Command::Size => cmd_size(cli),
        Command::Critval => cmd_critval(cli),
        Command::Pvalue => cmd_pvalue(cli),
        Command::Power => cmd_power(cli),
        Command::Hostile => cmd_hostile(cli),
        Command::BootstrapEval => cmd_bootstrap(cli),
    }
}

fn cmd_check(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let reports =
        feasibility::check_all(&problem, &cfg.model).map_err(classify_core)?;
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    io(report::write_report(&dir, "check.json", "check", &cfg, &reports, &[]))?;
    let controllable = reports
        .iter()
        .filter(|r| matches!(r.verdict, hrt_core::Verdict::SizeControllable))
        .count();
    println!(
        "check: {controllable}/12 statistics size-controllable; report in {}",
        dir.join("check.json").display()
    );
    Ok(())
}

fn cmd_size(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let family = cfg.statistic_family()?;
    let spec = StatisticSpec::new(&problem, family);
    let c = cfg
        .critical_value
        .ok_or_else(|| RunError::Validation("config key 'critical_value' is required".into()))?;
    let seed = cfg.effective_seed();
    let rep = sizecontrol::size(&problem, &spec, c, &cfg.model, &cfg.params, seed)
        .map_err(classify_core)?;
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    io(report::write_report(&dir, "size.json", "size", &cfg, &rep, &[]))?;
    println!(
        "size: {} at c = {c} for {family}: {:.6}",
        if rep.note.is_some() { "short-circuit" } else { "search" },
        rep.size
    );
    Ok(())
}

fn cmd_critval(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let family = cfg.statistic_family()?;
    let spec = StatisticSpec::new(&problem, family);
    let seed = cfg.effective_seed();
    let method = cfg.critval_method.unwrap_or(CritvalMethod::LineSearch);
    let outcome = match method {
        CritvalMethod::LineSearch => {
            sizecontrol::critical_value(&problem, &spec, cfg.alpha, &cfg.model, &cfg.params, seed)
        }
        CritvalMethod::Quantile => sizecontrol::critical_value_quantile(
            &problem, &spec, cfg.alpha, &cfg.model, &cfg.params, seed,
        ),
    };
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    match outcome {
        Ok(rep) => {
            io(report::write_report(&dir, "critval.json", "critval", &cfg, &rep, &[]))?;
            println!(
                "critval: {family} at alpha = {}: c = {:.6} (size {:.4}, {} iterations)",
                cfg.alpha, rep.c, rep.final_size, rep.iterations
            );
            Ok(())
        }
        Err(CoreError::NotConverged { report: rep }) => {
            let warn = format!(
                "critical-value search hit the iteration cap: best c = {:.6} with size {:.4}",
                rep.c, rep.final_size
            );
            io(report::write_report(&dir, "critval.json", "critval", &cfg, &rep, &[warn.clone()]))?;
            println!("critval: NOT CONVERGED; best c = {:.6}", rep.c);
            Err(RunError::Partial(warn))
        }
        Err(e) => Err(classify_core(e)),
    }
}

fn cmd_pvalue(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let family = cfg.statistic_family()?;
    let spec = StatisticSpec::new(&problem, family);
    let y_path = cfg
        .y_path
        .as_ref()
        .ok_or_else(|| RunError::Validation("config key 'y_path' is required".into()))?;
    let y = read_vector_csv(y_path)?;
    let seed = cfg.effective_seed();
    let t_obs = hrt_core::statistics::evaluate(&problem, &spec, &y)
        .map_err(classify_core)?
        .value;
    let p = sizecontrol::max_pvalue(&problem, &spec, &y, &cfg.model, &cfg.params, seed)
        .map_err(classify_core)?;
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    let result = json!({
        "statistic": family.label(),
        "observed_value": t_obs,
        "max_pvalue": p,
        "alpha": cfg.alpha,
        "reject": p <= cfg.alpha,
    });
    io(report::write_report(&dir, "pvalue.json", "pvalue", &cfg, &result, &[]))?;
    println!(
        "pvalue: T = {t_obs:.6}, maximal p = {p:.6} -> {} at alpha = {}",
        if p <= cfg.alpha { "reject" } else { "do not reject" },
        cfg.alpha
    );
    Ok(())
}

fn cmd_power(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let family = cfg.statistic_family()?;
    let spec = StatisticSpec::new(&problem, family);
    let c = cfg
        .critical_value
        .ok_or_else(|| RunError::Validation("config key 'critical_value' is required".into()))?;
    let sigma_raw = cfg
        .sigma
        .as_ref()
        .ok_or_else(|| RunError::Validation("config key 'sigma' is required".into()))?;
    if sigma_raw.len() != problem.n() {
        return Err(RunError::Validation(format!(
            "sigma has length {}, expected n = {}",
            sigma_raw.len(),
            problem.n()
        )));
    }
    let sigma = CovarianceCandidate::from_unnormalized(nalgebra::DVector::from_vec(
        sigma_raw.clone(),
    ))
    .map_err(classify_core)?;
    let label = cfg.sigma_label.clone().unwrap_or_else(|| "sigma".into());
    let grid = cfg.delta_grid();
    let seed = cfg.effective_seed();
    let curve = power_curve(&problem, &spec, c, &sigma, &grid, &cfg.params, seed)
        .map_err(classify_core)?;
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    let mut files = vec![io(report::write_power_csv(&dir, &label, &curve))?];
    let mut curves = vec![curve];
    if cfg.include_oracle && problem.q() == 1 {
        let oracle = oracle_power_curve(&problem, &sigma, cfg.alpha, &grid, &cfg.params)
            .map_err(classify_core)?;
        files.push(io(report::write_power_csv(&dir, &label, &oracle))?);
        curves.push(oracle);
    }
    io(report::write_report(&dir, "power.json", "power", &cfg, &curves, &[]))?;
    println!(
        "power: {} curve(s) over {} grid points written to {}",
        curves.len(),
        grid.len(),
        dir.display()
    );
    let _ = files;
    Ok(())
}

fn cmd_hostile(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let family = cfg.statistic_family()?;
    let n = cfg
        .hostile_n
        .ok_or_else(|| RunError::Validation("config key 'hostile_n' is required".into()))?;
    if n < 3 {
        return Err(RunError::Validation("hostile_n must be at least 3".into()));
    }
    let mut options = HostileOptions {
        params: cfg.params.clone(),
        ..HostileOptions::default()
    };
    if let Some(r) = cfg.restarts {
        options.restarts = r;
    }
    if let Some(it) = cfg.nm_max_iter {
        options.nm_max_iter = it;
    }
    let seed = cfg.effective_seed();
    let res = hostile_search(n, family, cfg.alpha, seed, &options).map_err(classify_core)?;
    let dir = cfg.output_dir(cli.output_dir.as_deref());
    io(report::write_design_csv(&dir, "hostile_design.csv", &res.x))?;
    io(report::write_report(&dir, "hostile.json", "hostile", &cfg, &res, &[]))?;
    println!(
        "hostile: {family} c* = {:.4}; size at chi2 quantile {:.4}, at F quantile {:.4}",
        res.c_star,
        res.sizes_at_conventional.chi2_quantile,
        res.sizes_at_conventional.f_quantile
    );
    Ok(())
}

fn cmd_bootstrap(cli: &Cli) -> Result<(), RunError> {
    let cfg = load_config(cli)?;
    let problem = cfg.build_problem()?;
    let family = cfg.statistic_family()?;
    let spec = StatisticSpec::new(&problem, family);
    let variant = cfg
        .bootstrap_variant
        .ok_or_else(|| RunError::Validation("config key 'bootstrap_variant' is required".into()))?;
    if variant == BootstrapVariant::H {
        return Err(RunError::Validation(
            "bootstrap variant H needs a covariance-estimator plugin and is available \
             through the library API only"
                .into(),
        ));
    }
    let seed = cfg.effective_seed();
    let dir = cfg.output_dir(cli.output_dir.as_deref());

    if let Some(y_path) = &cfg.y_path {
        let y = read_vector_csv(y_path)?;
        let decision = bootstrap_reject(
            &problem, &spec, &y, variant, cfg.alpha, None, &cfg.params,
        )
        .map_err(classify_core)?;
        io(report::write_report(&dir, "bootstrap.json", "bootstrap-eval", &cfg, &decision, &[]))?;
        println!(
            "bootstrap-eval: T = {:.6}, critical value {:.6} -> {}",
            decision.statistic,
            decision.critical_value,
            if decision.reject { "reject" } else { "do not reject" }
        );
        return Ok(());
    }

    let sigma_raw = cfg.sigma.as_ref().ok_or_else(|| {
        RunError::Validation("config needs either 'y_path' or 'sigma' for bootstrap-eval".into())
    })?;
    if sigma_raw.len() != problem.n() {
        return Err(RunError::Validation(format!(
            "sigma has length {}, expected n = {}",
            sigma_raw.len(),
            problem.n()
        )));
    }
    let sigma = CovarianceCandidate::from_unnormalized(nalgebra::DVector::from_vec(
        sigma_raw.clone(),
    ))
    .map_err(classify_core)?;
    let rate = bootstrap_null_rejection(
        &problem,
        &spec,
        variant,
        &sigma,
        cfg.alpha,
        cfg.params.mc_reps,
        seed,
        None,
        &cfg.params,
    )
    .map_err(classify_core)?;
    let result = json!({
        "statistic": family.label(),
        "variant": variant,
        "alpha": cfg.alpha,
        "reps": cfg.params.mc_reps,
        "null_rejection": rate,
    });
    io(report::write_report(&dir, "bootstrap.json", "bootstrap-eval", &cfg, &result, &[]))?;
    println!(
        "bootstrap-eval: variant {variant:?} with {family}: null rejection {rate:.4} over {} reps",
        cfg.params.mc_reps
    );
    Ok(())
}
