//! Command-line front end: fit models, run one-shot detection on user data,
//! calibrate thresholds, and drive sweep experiments.
//!
//! Exit codes: 0 on success, 2 on input or config errors, 3 on numerical or
//! model errors. Decisions and summaries go to standard output, diagnostics
//! to standard error.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::config::{ConfigError, RunConfig};
use crate::detector::{
    difference_statistic, edt_decide, DetectionConfig, Decision, ThresholdMethod,
};
use crate::models::{fit_mle, Dataset, Family, ModelError, NoiseSpec};
use crate::numstat::{eigh, RngStream};
use crate::simharness::{
    default_grid, run_experiment, write_curve_csv, ExperimentCurve, ExperimentSpec, SimError,
};
use crate::threshold::{
    chi2_threshold, mc_threshold, nominal_sigma_delta, DesignSpec, ThresholdDiagnostics,
    ThresholdReport, DEFAULT_TRIALS,
};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mcd",
    version,
    about = "Change detection between two maximum-likelihood model fits"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one dataset and print the estimate with its Fisher spectrum.
    Fit {
        /// Dataset CSV with header y,x1,...,xd.
        dataset: PathBuf,
        /// Model family: linear or logistic.
        #[arg(long, value_parser = Family::from_str)]
        family: Family,
        /// Noise variance for the linear family (default 1).
        #[arg(long)]
        sigma2: Option<f64>,
    },
    /// Fit pre- and post-change datasets and decide whether the model changed.
    Detect {
        /// Pre-change dataset CSV.
        pre: PathBuf,
        /// Post-change dataset CSV.
        post: PathBuf,
        /// Model family: linear or logistic.
        #[arg(long, value_parser = Family::from_str)]
        family: Family,
        /// Change magnitude defining the null region.
        #[arg(long)]
        rho: f64,
        /// False alarm budget in (0, 1).
        #[arg(long)]
        alpha: f64,
        /// Threshold method: mc or chi2.
        #[arg(long, value_parser = ThresholdMethod::from_str)]
        method: ThresholdMethod,
        /// Noise variance for the linear family (default 1).
        #[arg(long)]
        sigma2: Option<f64>,
        /// Calibration seed for the mc method (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Calibration trials for the mc method (default 10000).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Resolve a detection threshold from a config file.
    Calibrate {
        /// Config file, one key = value per line.
        #[arg(long)]
        config: PathBuf,
        /// CSV file to append the resolved threshold to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep experiment from a config file and write the curve CSV.
    Simulate {
        /// Config file, one key = value per line.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub(crate) struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.to_string(),
        }
    }

    fn numeric(message: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        CliError::input(err)
    }
}

impl From<io::Error> for CliError {
    fn from(err: io::Error) -> Self {
        CliError::input(err)
    }
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command, &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn dispatch(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Fit {
            dataset,
            family,
            sigma2,
        } => cmd_fit(dataset, *family, *sigma2, out),
        Command::Detect {
            pre,
            post,
            family,
            rho,
            alpha,
            method,
            sigma2,
            seed,
            trials,
        } => cmd_detect(
            pre, post, *family, *rho, *alpha, *method, *sigma2, *seed, *trials, out,
        ),
        Command::Calibrate { config, out: path } => cmd_calibrate(config, path.as_deref(), out),
        Command::Simulate { config, out: path } => cmd_simulate(config, path, out),
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(CliError::input(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<(), CliError> {
    if !rho.is_finite() || rho <= 0.0 {
        return Err(CliError::input(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

fn make_noise(sigma2: Option<f64>) -> Result<NoiseSpec, CliError> {
    match sigma2 {
        None => Ok(NoiseSpec::unit()),
        Some(value) => NoiseSpec::new(value).map_err(CliError::input),
    }
}

fn read_dataset(path: &Path, family: Family) -> Result<Dataset, CliError> {
    Dataset::read_csv(path, family).map_err(|err| {
        let message = format!("{}: {err}", path.display());
        match err {
            ModelError::Csv { .. } | ModelError::Io(_) | ModelError::InvalidDataset(_) => {
                CliError::input(message)
            }
            _ => CliError::numeric(message),
        }
    })
}

fn join_displayed<T: fmt::Display>(values: impl IntoIterator<Item = T>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_fit(
    dataset: &Path,
    family: Family,
    sigma2: Option<f64>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let noise = make_noise(sigma2)?;
    let data = read_dataset(dataset, family)?;
    let fit = fit_mle(&data, &noise).map_err(|e| CliError::numeric(format!("fit failed: {e}")))?;
    let eigen = eigh(&fit.fisher_per_sample)
        .map_err(|e| CliError::numeric(format!("Fisher eigendecomposition failed: {e}")))?;

    writeln!(out, "family = {}", fit.family)?;
    writeln!(out, "n = {}", fit.n)?;
    writeln!(out, "d = {}", fit.theta_hat.len())?;
    writeln!(out, "theta_hat = {}", join_displayed(fit.theta_hat.iter()))?;
    writeln!(out, "neg_log_lik = {}", fit.neg_log_lik)?;
    writeln!(out, "fisher_lambda_min = {}", eigen.lambda_min())?;
    writeln!(out, "fisher_lambda_max = {}", eigen.lambda_max())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    pre: &Path,
    post: &Path,
    family: Family,
    rho: f64,
    alpha: f64,
    method: ThresholdMethod,
    sigma2: Option<f64>,
    seed: Option<u64>,
    trials: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    check_rho(rho)?;
    check_alpha(alpha)?;
    let noise = make_noise(sigma2)?;
    let pre_data = read_dataset(pre, family)?;
    let post_data = read_dataset(post, family)?;
    if pre_data.d() != post_data.d() {
        return Err(CliError::input(format!(
            "dimension mismatch: {} has {} features, {} has {}",
            pre.display(),
            pre_data.d(),
            post.display(),
            post_data.d()
        )));
    }

    let pre_fit = fit_mle(&pre_data, &noise)
        .map_err(|e| CliError::numeric(format!("pre-change fit failed: {e}")))?;
    let post_fit = fit_mle(&post_data, &noise)
        .map_err(|e| CliError::numeric(format!("post-change fit failed: {e}")))?;
    let stat = difference_statistic(&pre_fit, &post_fit).map_err(CliError::numeric)?;

    let eta = match method {
        ThresholdMethod::Chi2Approx => {
            chi2_threshold(&stat.eigen, rho, alpha, pre_data.d())
                .map_err(CliError::numeric)?
                .eta
        }
        ThresholdMethod::MonteCarlo => {
            let trials = trials.unwrap_or(DEFAULT_TRIALS);
            let seed = seed.unwrap_or(0);
            eprintln!("calibrating threshold: {trials} trials at seed {seed}");
            let design = DesignSpec::new(
                pre_data.d(),
                pre_data.n(),
                post_data.n(),
                noise,
                pre_fit.theta_hat.clone(),
            )
            .map_err(CliError::numeric)?;
            mc_threshold(family, &design, rho, alpha, trials, RngStream::new(seed))
                .map_err(CliError::numeric)?
                .eta
        }
    };

    let config = DetectionConfig::new(rho, alpha, method)
        .map_err(CliError::input)?
        .with_eta(eta);
    let decision: Decision = edt_decide(&stat, &config).map_err(CliError::numeric)?;

    writeln!(out, "statistic = {}", decision.statistic)?;
    writeln!(out, "threshold = {}", decision.threshold_used)?;
    writeln!(out, "method = {}", decision.method)?;
    writeln!(out, "raised = {}", decision.raised)?;
    writeln!(out, "sigma_delta_lambda_min = {}", stat.eigen.lambda_min())?;
    writeln!(out, "sigma_delta_lambda_max = {}", stat.eigen.lambda_max())?;
    Ok(())
}

fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::input(format!("config is missing required key {key}")))
}

fn resolve_theta(config: &RunConfig, family: Family, d: usize) -> Result<DVector<f64>, CliError> {
    match (&config.theta, family) {
        (Some(theta), _) => {
            if theta.len() != d {
                return Err(CliError::input(format!(
                    "theta has {} entries but d = {d}",
                    theta.len()
                )));
            }
            Ok(DVector::from_vec(theta.clone()))
        }
        // The linear Fisher information does not depend on theta.
        (None, Family::Linear) => Ok(DVector::zeros(d)),
        (None, Family::Logistic) => Err(CliError::input(
            "config is missing required key theta (logistic thresholds depend on it)",
        )),
    }
}

fn write_report(report: &ThresholdReport, out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "method = {}", report.method)?;
    writeln!(out, "alpha = {}", report.alpha)?;
    writeln!(out, "eta = {}", report.eta)?;
    match report.diagnostics {
        ThresholdDiagnostics::MonteCarlo { trials, std_err } => {
            writeln!(out, "trials = {trials}")?;
            writeln!(out, "std_err = {std_err}")?;
        }
        ThresholdDiagnostics::Chi2 {
            lambda_max,
            lambda_min,
            noncentrality_bound,
        } => {
            writeln!(out, "lambda_max = {lambda_max}")?;
            writeln!(out, "lambda_min = {lambda_min}")?;
            writeln!(out, "noncentrality_bound = {noncentrality_bound}")?;
        }
    }
    Ok(())
}

struct CalibrationInputs {
    family: Family,
    design: DesignSpec,
    rho: f64,
    alpha: f64,
    trials: usize,
    seed: u64,
}

fn calibration_inputs(config: &RunConfig) -> Result<CalibrationInputs, CliError> {
    let family = require(&config.family, "family")?;
    let d = require(&config.d, "d")?;
    let n = require(&config.n, "n")?;
    let n_prime = require(&config.n_prime, "n_prime")?;
    let rho = require(&config.rho, "rho")?;
    let alpha = require(&config.alpha, "alpha")?;
    check_rho(rho)?;
    check_alpha(alpha)?;
    let noise = make_noise(config.sigma2)?;
    let theta = resolve_theta(config, family, d)?;
    let design = DesignSpec::new(d, n, n_prime, noise, theta).map_err(CliError::numeric)?;
    Ok(CalibrationInputs {
        family,
        design,
        rho,
        alpha,
        trials: config.trials.unwrap_or(DEFAULT_TRIALS),
        seed: config.seed.unwrap_or(0),
    })
}

fn append_threshold_row(
    path: &Path,
    config: &RunConfig,
    inputs: &CalibrationInputs,
    report: &ThresholdReport,
) -> Result<(), CliError> {
    let header_needed = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if header_needed {
        writeln!(
            file,
            "method,family,d,n,n_prime,sigma2,rho,alpha,trials,seed,eta"
        )?;
    }
    let (trials, seed) = match report.method {
        ThresholdMethod::MonteCarlo => (inputs.trials.to_string(), inputs.seed.to_string()),
        ThresholdMethod::Chi2Approx => (String::new(), String::new()),
    };
    writeln!(
        file,
        "{},{},{},{},{},{},{},{},{},{},{}",
        report.method,
        inputs.family,
        inputs.design.d,
        inputs.design.n,
        inputs.design.n_prime,
        config.sigma2.unwrap_or(1.0),
        inputs.rho,
        report.alpha,
        trials,
        seed,
        report.eta
    )?;
    Ok(())
}

fn cmd_calibrate(
    config_path: &Path,
    out_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let method = require(&config.method, "method")?;
    let inputs = calibration_inputs(&config)?;

    let report = match method {
        ThresholdMethod::Chi2Approx => {
            let eigen =
                nominal_sigma_delta(inputs.family, &inputs.design).map_err(CliError::numeric)?;
            chi2_threshold(&eigen, inputs.rho, inputs.alpha, inputs.design.d)
                .map_err(CliError::numeric)?
        }
        ThresholdMethod::MonteCarlo => {
            eprintln!(
                "calibrating threshold: {} trials at seed {}",
                inputs.trials, inputs.seed
            );
            mc_threshold(
                inputs.family,
                &inputs.design,
                inputs.rho,
                inputs.alpha,
                inputs.trials,
                RngStream::new(inputs.seed),
            )
            .map_err(CliError::numeric)?
        }
    };

    write_report(&report, out)?;
    if let Some(path) = out_path {
        append_threshold_row(path, &config, &inputs, &report)?;
    }
    Ok(())
}

fn experiment_spec(config: &RunConfig) -> Result<ExperimentSpec, CliError> {
    Ok(ExperimentSpec {
        family: require(&config.family, "family")?,
        d: require(&config.d, "d")?,
        n: require(&config.n, "n")?,
        n_prime: require(&config.n_prime, "n_prime")?,
        sigma2: config.sigma2.unwrap_or(1.0),
        rho: require(&config.rho, "rho")?,
        alpha: require(&config.alpha, "alpha")?,
        grid: config.grid.clone().unwrap_or_else(default_grid),
        trials_per_point: require(&config.trials_per_point, "trials_per_point")?,
        tests: require(&config.tests, "tests")?,
        seed: require(&config.seed, "seed")?,
    })
}

fn lift_sim_error(err: SimError) -> CliError {
    match err {
        SimError::InvalidSpec(_) | SimError::DomainError(_) => CliError::input(err),
        _ => CliError::numeric(err),
    }
}

fn curve_summary(curve: &ExperimentCurve) -> Vec<String> {
    let grid = &curve.spec.grid;
    let mut marks = vec![grid[0]];
    if grid.contains(&1.0) && grid[0] != 1.0 && grid[grid.len() - 1] != 1.0 {
        marks.push(1.0);
    }
    if grid.len() > 1 {
        marks.push(grid[grid.len() - 1]);
    }
    curve
        .spec
        .tests
        .iter()
        .map(|test| {
            let parts: Vec<String> = marks
                .iter()
                .filter_map(|&mark| {
                    curve
                        .points
                        .iter()
                        .find(|p| p.test == *test && p.normalized_change == mark)
                        .map(|p| format!("p_raise {} at {}", p.p_raise, p.normalized_change))
                })
                .collect();
            format!("{test}: {}", parts.join(", "))
        })
        .collect()
}

fn cmd_simulate(config_path: &Path, out_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let spec = experiment_spec(&config)?;
    eprintln!(
        "sweeping {} grid points, {} trials each",
        spec.grid.len(),
        spec.trials_per_point
    );
    let curve = run_experiment(&spec).map_err(lift_sim_error)?;

    let mut file = std::fs::File::create(out_path)
        .map_err(|e| CliError::input(format!("{}: {e}", out_path.display())))?;
    write_curve_csv(&curve, &mut file)?;
    file.flush()?;

    for line in curve_summary(&curve) {
        writeln!(out, "{line}")?;
    }
    Ok(())
}
