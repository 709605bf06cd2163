//! Experiment engine: sweeps the normalized model change from 0 to 2 and
//! estimates raise-probability curves for the difference test under both
//! threshold methods and, for the linear family, the likelihood ratio test.

use std::fmt;
use std::io;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{glr_linear, raises, DetectorError};
use crate::models::{generate_dataset, fit_mle, Family, ModelError, NoiseSpec};
use crate::numstat::{standard_normal, NumStatError, RngStream};
use crate::threshold::{
    boundary_null_pair, chi2_threshold, mc_pair_statistics, mc_threshold, nominal_sigma_delta,
    upper_order_statistic, DesignSpec, ThresholdError, DEFAULT_TRIALS,
};

const MIN_TRIALS_PER_POINT: usize = 100;
const MAX_RETRIES: usize = 5;

const TAG_PAIR: u64 = 1;
const TAG_CALIBRATION: u64 = 2;
const TAG_SWEEP: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error(
        "trial failed at grid point {grid_index} (normalized change {normalized_change}), \
         trial {trial}: {message}"
    )]
    TrialFailure {
        grid_index: usize,
        normalized_change: f64,
        trial: usize,
        message: String,
    },
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumStatError),
}

/// Tests the harness can evaluate along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TestKind {
    EdtMc,
    EdtChi2,
    Glrt,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestKind::EdtMc => write!(f, "edt_mc"),
            TestKind::EdtChi2 => write!(f, "edt_chi2"),
            TestKind::Glrt => write!(f, "glrt"),
        }
    }
}

impl FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edt_mc" => Ok(TestKind::EdtMc),
            "edt_chi2" => Ok(TestKind::EdtChi2),
            "glrt" => Ok(TestKind::Glrt),
            other => Err(format!(
                "unknown test {other:?}, expected \"edt_mc\", \"edt_chi2\", or \"glrt\""
            )),
        }
    }
}

/// Full description of one sweep experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub family: Family,
    pub d: usize,
    pub n: usize,
    pub n_prime: usize,
    pub sigma2: f64,
    pub rho: f64,
    pub alpha: f64,
    pub grid: Vec<f64>,
    pub trials_per_point: usize,
    pub tests: Vec<TestKind>,
    pub seed: u64,
}

/// The default sweep: 21 points from 0 to 2 in steps of 0.1.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.d == 0 {
            return Err(SimError::InvalidSpec("dimension must be at least 1".into()));
        }
        if self.family == Family::Logistic && self.d < 2 {
            return Err(SimError::InvalidSpec(
                "logistic sweeps rotate parameters on the unit sphere and need d >= 2".into(),
            ));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "sigma2 must be positive and finite, got {}",
                self.sigma2
            )));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(SimError::InvalidSpec(format!(
                "rho must be positive and finite, got {}",
                self.rho
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimError::InvalidSpec(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.grid.is_empty() {
            return Err(SimError::InvalidSpec("grid must be non-empty".into()));
        }
        if self.grid.iter().any(|&g| !(g.is_finite() && g >= 0.0)) {
            return Err(SimError::InvalidSpec(
                "grid values must be finite and non-negative".into(),
            ));
        }
        if self.trials_per_point < MIN_TRIALS_PER_POINT {
            return Err(SimError::InvalidSpec(format!(
                "need at least {MIN_TRIALS_PER_POINT} trials per point, got {}",
                self.trials_per_point
            )));
        }
        if self.tests.is_empty() {
            return Err(SimError::InvalidSpec("tests must be non-empty".into()));
        }
        let mut seen = Vec::new();
        for test in &self.tests {
            if seen.contains(test) {
                return Err(SimError::InvalidSpec(format!("duplicate test {test}")));
            }
            seen.push(*test);
        }
        if self.tests.contains(&TestKind::Glrt) && self.family != Family::Linear {
            return Err(SimError::InvalidSpec(
                "glrt is only available for the linear family".into(),
            ));
        }
        Ok(())
    }
}

/// One curve row: the estimated raise probability for one test at one grid
/// point, with the threshold the decision used.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub normalized_change: f64,
    pub test: TestKind,
    pub p_raise: f64,
    pub std_err: f64,
    pub threshold: f64,
}

/// Sweep result: the echoed spec, the thresholds resolved before the sweep,
/// and one row per (grid point, test).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentCurve {
    pub spec: ExperimentSpec,
    pub thresholds: Vec<(TestKind, f64)>,
    pub points: Vec<CurvePoint>,
}

/// Draws the parameter pair for one grid point. The base parameter and the
/// change direction depend only on the stream, so every grid point of an
/// experiment shares them; the separation is normalized_change times rho.
///
/// Linear: theta is standard normal and the partner shifts along a fixed
/// random unit direction. Logistic: theta is uniform on the unit sphere and
/// the partner is its rotation by the angle whose chord is the separation,
/// in a fixed random 2-plane containing theta.
pub fn make_parameter_pair(
    rng: RngStream,
    family: Family,
    d: usize,
    normalized_change: f64,
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>), SimError> {
    if !(normalized_change.is_finite() && normalized_change >= 0.0) {
        return Err(SimError::DomainError(format!(
            "normalized change must be non-negative, got {normalized_change}"
        )));
    }
    let mut r = rng.rng();
    let separation = normalized_change * rho;
    match family {
        Family::Linear => {
            let theta = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            let mut direction = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            direction /= direction.norm();
            if normalized_change == 0.0 {
                return Ok((theta.clone(), theta));
            }
            let theta_prime = &theta + direction * separation;
            Ok((theta, theta_prime))
        }
        Family::Logistic => {
            if d < 2 {
                return Err(SimError::DomainError(
                    "logistic pairing rotates on the unit sphere and needs d >= 2".into(),
                ));
            }
            let mut theta = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            theta /= theta.norm();
            let mut tangent = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            tangent -= &theta * theta.dot(&tangent);
            tangent /= tangent.norm();
            if normalized_change == 0.0 {
                return Ok((theta.clone(), theta));
            }
            if separation > 2.0 {
                return Err(SimError::DomainError(format!(
                    "unit vectors cannot differ by {separation} (maximum 2)"
                )));
            }
            let phi = 2.0 * (separation / 2.0).asin();
            let theta_prime = &theta * phi.cos() + tangent * phi.sin();
            Ok((theta, theta_prime))
        }
    }
}

/// Runs `op` on `stream.derive(0)`, retrying failures on successive derived
/// substreams up to `max_retries` extra attempts.
pub(crate) fn with_retries<T>(
    stream: RngStream,
    max_retries: usize,
    op: impl Fn(RngStream) -> Result<T, String>,
) -> Result<T, String> {
    let mut last = String::new();
    for attempt in 0..=max_retries {
        match op(stream.derive(attempt as u64)) {
            Ok(value) => return Ok(value),
            Err(message) => last = message,
        }
    }
    Err(format!("{last} (after {} attempts)", max_retries + 1))
}

struct TrialOutcome {
    difference_norm: f64,
    glr: Option<f64>,
}

fn run_trial(
    spec: &ExperimentSpec,
    noise: &NoiseSpec,
    theta: &DVector<f64>,
    theta_prime: &DVector<f64>,
    want_glr: bool,
    stream: RngStream,
) -> Result<TrialOutcome, String> {
    with_retries(stream, MAX_RETRIES, |attempt_stream| {
        let pre = generate_dataset(
            attempt_stream.derive(0),
            spec.family,
            theta,
            spec.n,
            noise,
        );
        let post = generate_dataset(
            attempt_stream.derive(1),
            spec.family,
            theta_prime,
            spec.n_prime,
            noise,
        );
        let pre_fit = fit_mle(&pre, noise).map_err(|e| e.to_string())?;
        let post_fit = fit_mle(&post, noise).map_err(|e| e.to_string())?;
        let difference_norm = (&post_fit.theta_hat - &pre_fit.theta_hat).norm();
        let glr = if want_glr {
            Some(
                glr_linear(&pre, &post, noise, spec.rho)
                    .map_err(|e| e.to_string())?
                    .glr,
            )
        } else {
            None
        };
        Ok(TrialOutcome {
            difference_norm,
            glr,
        })
    })
}

/// Resolves all thresholds, then estimates the raise probability of each
/// requested test at each grid point from fresh replications.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentCurve, SimError> {
    spec.validate()?;
    let master = RngStream::new(spec.seed);
    let pair_stream = master.derive(TAG_PAIR);
    let calibration_stream = master.derive(TAG_CALIBRATION);
    let sweep_stream = master.derive(TAG_SWEEP);
    let noise = NoiseSpec::new(spec.sigma2)?;

    let (theta_base, _) = make_parameter_pair(pair_stream, spec.family, spec.d, 0.0, spec.rho)?;
    let design = DesignSpec::new(spec.d, spec.n, spec.n_prime, noise, theta_base)?;

    let mut thresholds = Vec::with_capacity(spec.tests.len());
    for test in &spec.tests {
        let eta = match test {
            TestKind::EdtMc => {
                mc_threshold(
                    spec.family,
                    &design,
                    spec.rho,
                    spec.alpha,
                    DEFAULT_TRIALS,
                    calibration_stream,
                )?
                .eta
            }
            TestKind::EdtChi2 => {
                let eigen = nominal_sigma_delta(spec.family, &design)?;
                chi2_threshold(&eigen, spec.rho, spec.alpha, spec.d)?.eta
            }
            TestKind::Glrt => {
                let (theta, theta_prime) =
                    boundary_null_pair(spec.family, &design, spec.rho)?;
                let mut stats = mc_pair_statistics(
                    spec.family,
                    &design,
                    &theta,
                    &theta_prime,
                    DEFAULT_TRIALS,
                    calibration_stream,
                    |pre, post| {
                        glr_linear(pre, post, &noise, spec.rho)
                            .map(|r| r.glr)
                            .map_err(|e| e.to_string())
                    },
                )?;
                upper_order_statistic(&mut stats, spec.alpha)
            }
        };
        thresholds.push((*test, eta));
    }

    let want_glr = spec.tests.contains(&TestKind::Glrt);
    let mut points = Vec::with_capacity(spec.grid.len() * spec.tests.len());
    for (grid_index, &normalized_change) in spec.grid.iter().enumerate() {
        let (theta, theta_prime) =
            make_parameter_pair(pair_stream, spec.family, spec.d, normalized_change, spec.rho)?;
        let point_stream = sweep_stream.derive(grid_index as u64);
        let outcomes: Vec<Result<TrialOutcome, String>> = (0..spec.trials_per_point)
            .into_par_iter()
            .map(|trial| {
                run_trial(
                    spec,
                    &noise,
                    &theta,
                    &theta_prime,
                    want_glr,
                    point_stream.derive(trial as u64),
                )
            })
            .collect();
        let mut trials = Vec::with_capacity(outcomes.len());
        for (trial, outcome) in outcomes.into_iter().enumerate() {
            trials.push(outcome.map_err(|message| SimError::TrialFailure {
                grid_index,
                normalized_change,
                trial,
                message,
            })?);
        }
        for &(test, eta) in &thresholds {
            let raised = trials
                .iter()
                .filter(|outcome| match test {
                    TestKind::EdtMc | TestKind::EdtChi2 => raises(outcome.difference_norm, eta),
                    TestKind::Glrt => raises(outcome.glr.expect("glr computed for glrt"), eta),
                })
                .count();
            let p_raise = raised as f64 / spec.trials_per_point as f64;
            points.push(CurvePoint {
                normalized_change,
                test,
                p_raise,
                std_err: (p_raise * (1.0 - p_raise) / spec.trials_per_point as f64).sqrt(),
                threshold: eta,
            });
        }
    }

    Ok(ExperimentCurve {
        spec: spec.clone(),
        thresholds,
        points,
    })
}

fn join_displayed<T: fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the curve as CSV: `#`-prefixed metadata (spec echo and resolved
/// thresholds), then a header and one row per (grid point, test).
pub fn write_curve_csv<W: io::Write>(curve: &ExperimentCurve, writer: &mut W) -> io::Result<()> {
    let spec = &curve.spec;
    writeln!(writer, "# family = {}", spec.family)?;
    writeln!(writer, "# d = {}", spec.d)?;
    writeln!(writer, "# n = {}", spec.n)?;
    writeln!(writer, "# n_prime = {}", spec.n_prime)?;
    writeln!(writer, "# sigma2 = {}", spec.sigma2)?;
    writeln!(writer, "# rho = {}", spec.rho)?;
    writeln!(writer, "# alpha = {}", spec.alpha)?;
    writeln!(writer, "# grid = {}", join_displayed(&spec.grid))?;
    writeln!(writer, "# trials_per_point = {}", spec.trials_per_point)?;
    writeln!(writer, "# tests = {}", join_displayed(&spec.tests))?;
    writeln!(writer, "# seed = {}", spec.seed)?;
    writeln!(
        writer,
        "# parameters: theta and the change direction are fixed per experiment; designs are redrawn per trial"
    )?;
    for (test, eta) in &curve.thresholds {
        writeln!(writer, "# threshold {test} = {eta}")?;
    }
    writeln!(writer, "normalized_change,test,p_raise,std_err,threshold")?;
    for point in &curve.points {
        writeln!(
            writer,
            "{},{},{},{},{}",
            point.normalized_change, point.test, point.p_raise, point.std_err, point.threshold
        )?;
    }
    Ok(())
}
