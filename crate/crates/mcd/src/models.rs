//! Model families and maximum-likelihood fitting.
//!
//! Two families are supported: linear regression with known Gaussian noise
//! variance and logistic regression with labels in {-1, +1}. Both expose the
//! same interface: a negative log-likelihood, its gradient and Hessian, an
//! MLE fitter, and per-sample Fisher information evaluated either at a fitted
//! parameter or at a nominal parameter under the standard-normal feature
//! distribution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::numstat::{eigh, standard_normal, NumStatError, RngStream};

/// Condition number at which a design matrix is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_GRAD_TOL: f64 = 1e-8;
const NEWTON_THETA_LIMIT: f64 = 1e6;
const ARMIJO_SLOPE: f64 = 1e-4;
const ARMIJO_MIN_STEP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular design: condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}")]
    SingularDesign { cond: f64 },
    #[error("separation detected while fitting logistic model: {0}")]
    Separation(String),
    #[error("Newton iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid noise specification: variance must be positive and finite, got {0}")]
    InvalidNoise(f64),
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numeric(#[from] NumStatError),
}

/// Model family tag carried by datasets and fitted models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Linear,
    Logistic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Linear => write!(f, "linear"),
            Family::Logistic => write!(f, "logistic"),
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Family::Linear),
            "logistic" => Ok(Family::Logistic),
            other => Err(format!(
                "unknown family {other:?}, expected \"linear\" or \"logistic\""
            )),
        }
    }
}

/// Known noise variance for the linear family.
///
/// The logistic family has no noise parameter; interfaces that accept a
/// `NoiseSpec` simply ignore it in that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn new(sigma2: f64) -> Result<Self, ModelError> {
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(ModelError::InvalidNoise(sigma2));
        }
        Ok(NoiseSpec { sigma2 })
    }

    /// Unit variance, the conventional default.
    pub fn unit() -> Self {
        NoiseSpec { sigma2: 1.0 }
    }
}

/// A sample set: an n-by-d feature matrix with one response per row.
///
/// Responses are real-valued for the linear family and must be -1 or +1 for
/// the logistic family.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub responses: DVector<f64>,
    pub family: Family,
}

impl Dataset {
    pub fn new(
        family: Family,
        features: DMatrix<f64>,
        responses: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(ModelError::InvalidDataset(format!(
                "need at least one sample and one feature, got {}x{}",
                features.nrows(),
                features.ncols()
            )));
        }
        if responses.len() != features.nrows() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} samples but {} responses",
                features.nrows(),
                responses.len()
            )));
        }
        if family == Family::Logistic {
            for (i, &y) in responses.iter().enumerate() {
                if y != 1.0 && y != -1.0 {
                    return Err(ModelError::InvalidDataset(format!(
                        "logistic response at row {i} must be -1 or +1, got {y}"
                    )));
                }
            }
        }
        Ok(Dataset {
            features,
            responses,
            family,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Reads a dataset from a CSV file with header `y,x1,...,xd`.
    pub fn read_csv<P: AsRef<Path>>(path: P, family: Family) -> Result<Self, ModelError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())
            .map_err(csv_error)?;

        let headers = reader.headers().map_err(csv_error)?.clone();
        if headers.len() < 2 || headers.get(0) != Some("y") {
            return Err(ModelError::Csv {
                line: 1,
                message: format!(
                    "expected header y,x1,...,xd, got {:?}",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let d = headers.len() - 1;
        for j in 0..d {
            let expected = format!("x{}", j + 1);
            if headers.get(j + 1) != Some(expected.as_str()) {
                return Err(ModelError::Csv {
                    line: 1,
                    message: format!(
                        "expected column {} to be named {expected:?}, got {:?}",
                        j + 2,
                        headers.get(j + 1).unwrap_or("")
                    ),
                });
            }
        }

        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            let mut row = Vec::with_capacity(d + 1);
            for field in record.iter() {
                let value: f64 = field.parse().map_err(|_| ModelError::Csv {
                    line,
                    message: format!("could not parse {field:?} as a number"),
                })?;
                row.push(value);
            }
            ys.push(row[0]);
            xs.extend_from_slice(&row[1..]);
        }
        if ys.is_empty() {
            return Err(ModelError::InvalidDataset("no data rows".into()));
        }

        let n = ys.len();
        let features = DMatrix::from_row_slice(n, d, &xs);
        let responses = DVector::from_vec(ys);
        Dataset::new(family, features, responses)
    }

    /// Writes the dataset as CSV with header `y,x1,...,xd`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), ModelError> {
        let mut writer = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
        let mut header = vec!["y".to_string()];
        for j in 0..self.d() {
            header.push(format!("x{}", j + 1));
        }
        writer.write_record(&header).map_err(csv_error)?;
        for i in 0..self.n() {
            let mut row = vec![format!("{}", self.responses[i])];
            for j in 0..self.d() {
                row.push(format!("{}", self.features[(i, j)]));
            }
            writer.write_record(&row).map_err(csv_error)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn csv_error(err: csv::Error) -> ModelError {
    let line = err.position().map_or(0, |p| p.line());
    let message = err.to_string();
    match err.into_kind() {
        csv::ErrorKind::Io(io) => ModelError::Io(io),
        _ => ModelError::Csv { line, message },
    }
}

/// Result of maximum-likelihood fitting.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub theta_hat: DVector<f64>,
    /// Per-sample Fisher information evaluated at `theta_hat`.
    pub fisher_per_sample: DMatrix<f64>,
    pub n: usize,
    pub neg_log_lik: f64,
    pub family: Family,
}

fn check_dims(data: &Dataset, theta: &DVector<f64>) -> Result<(), ModelError> {
    if theta.len() != data.d() {
        return Err(ModelError::DimensionMismatch(format!(
            "parameter has {} entries but data has {} features",
            theta.len(),
            data.d()
        )));
    }
    Ok(())
}

/// Numerically stable logistic function 1 / (1 + exp(-z)).
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(z)).
fn softplus(z: f64) -> f64 {
    if z >= 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Negative log-likelihood of `theta` on `data`.
///
/// Linear: sum_i (y_i - x_i'theta)^2 / (2 sigma^2) + (n/2) log(2 pi sigma^2).
/// Logistic: sum_i log(1 + exp(-y_i x_i'theta)); `noise` is ignored.
pub fn neg_log_likelihood(
    data: &Dataset,
    theta: &DVector<f64>,
    noise: &NoiseSpec,
) -> Result<f64, ModelError> {
    check_dims(data, theta)?;
    let t = &data.features * theta;
    match data.family {
        Family::Linear => {
            let residual = &data.responses - &t;
            let n = data.n() as f64;
            Ok(residual.norm_squared() / (2.0 * noise.sigma2)
                + 0.5 * n * (2.0 * std::f64::consts::PI * noise.sigma2).ln())
        }
        Family::Logistic => Ok(t
            .iter()
            .zip(data.responses.iter())
            .map(|(&ti, &yi)| softplus(-yi * ti))
            .sum()),
    }
}

/// Gradient of the negative log-likelihood with respect to `theta`.
pub fn nll_gradient(
    data: &Dataset,
    theta: &DVector<f64>,
    noise: &NoiseSpec,
) -> Result<DVector<f64>, ModelError> {
    check_dims(data, theta)?;
    let t = &data.features * theta;
    match data.family {
        Family::Linear => {
            let residual = &data.responses - &t;
            Ok(data.features.tr_mul(&residual) / (-noise.sigma2))
        }
        Family::Logistic => {
            let weights = DVector::from_fn(data.n(), |i, _| {
                let yi = data.responses[i];
                -yi * sigmoid(-yi * t[i])
            });
            Ok(data.features.tr_mul(&weights))
        }
    }
}

/// Hessian of the negative log-likelihood with respect to `theta`.
pub fn nll_hessian(
    data: &Dataset,
    theta: &DVector<f64>,
    noise: &NoiseSpec,
) -> Result<DMatrix<f64>, ModelError> {
    check_dims(data, theta)?;
    match data.family {
        Family::Linear => Ok(data.features.tr_mul(&data.features) / noise.sigma2),
        Family::Logistic => {
            let t = &data.features * theta;
            let mut weighted = data.features.clone();
            for i in 0..data.n() {
                let s = sigmoid(t[i]);
                let w = s * (1.0 - s);
                for j in 0..data.d() {
                    weighted[(i, j)] *= w;
                }
            }
            Ok(data.features.tr_mul(&weighted))
        }
    }
}

/// Fits the maximum-likelihood parameter for the dataset's family.
///
/// The linear fit solves the normal equations after checking the design for
/// near-singularity. The logistic fit runs Newton's method with step halving
/// from the origin and reports separation when the iterates diverge or the
/// Hessian degenerates.
pub fn fit_mle(data: &Dataset, noise: &NoiseSpec) -> Result<FittedModel, ModelError> {
    let theta_hat = match data.family {
        Family::Linear => fit_linear(data)?,
        Family::Logistic => fit_logistic(data, noise)?,
    };
    let neg_log_lik = neg_log_likelihood(data, &theta_hat, noise)?;
    let fisher = fisher_per_sample(data, &theta_hat, noise)?;
    Ok(FittedModel {
        theta_hat,
        fisher_per_sample: fisher,
        n: data.n(),
        neg_log_lik,
        family: data.family,
    })
}

fn fit_linear(data: &Dataset) -> Result<DVector<f64>, ModelError> {
    let xtx = data.features.tr_mul(&data.features);
    let eig = eigh(&xtx)?;
    let lambda_min = eig.lambda_min();
    let cond = if lambda_min > 0.0 {
        eig.lambda_max() / lambda_min
    } else {
        f64::INFINITY
    };
    if cond >= CONDITION_LIMIT {
        return Err(ModelError::SingularDesign { cond });
    }
    let xty = data.features.tr_mul(&data.responses);
    let chol = Cholesky::new(xtx).ok_or(ModelError::SingularDesign { cond })?;
    Ok(chol.solve(&xty))
}

fn fit_logistic(data: &Dataset, noise: &NoiseSpec) -> Result<DVector<f64>, ModelError> {
    let d = data.d();
    let mut theta = DVector::zeros(d);
    let mut value = neg_log_likelihood(data, &theta, noise)?;

    for _ in 0..NEWTON_MAX_ITERS {
        let grad = nll_gradient(data, &theta, noise)?;
        if grad.amax() <= NEWTON_GRAD_TOL {
            return Ok(theta);
        }
        let hess = nll_hessian(data, &theta, noise)?;
        let chol = Cholesky::new(hess).ok_or_else(|| {
            ModelError::Separation("Hessian lost positive definiteness".into())
        })?;
        let direction = -chol.solve(&grad);
        let slope = grad.dot(&direction);

        // Near the optimum the predicted decrease -slope drops below the
        // floating-point noise of the objective, where a sufficient-decrease
        // test only rejects steps on roundoff. Take the full Newton step
        // there; the gradient contracts quadratically.
        let noise_floor = 1e-13 * (1.0 + value.abs());
        if -slope <= noise_floor {
            theta += &direction;
            value = neg_log_likelihood(data, &theta, noise)?;
        } else {
            let mut step = 1.0;
            loop {
                let candidate = &theta + step * &direction;
                let candidate_value = neg_log_likelihood(data, &candidate, noise)?;
                if candidate_value <= value + ARMIJO_SLOPE * step * slope {
                    theta = candidate;
                    value = candidate_value;
                    break;
                }
                step *= 0.5;
                if step < ARMIJO_MIN_STEP {
                    return Err(ModelError::Separation(
                        "line search stalled while the gradient norm stayed above tolerance"
                            .into(),
                    ));
                }
            }
        }
        if theta.norm() > NEWTON_THETA_LIMIT {
            return Err(ModelError::Separation(format!(
                "parameter norm exceeded {NEWTON_THETA_LIMIT:.0e}"
            )));
        }
    }
    Err(ModelError::NoConvergence(NEWTON_MAX_ITERS))
}

/// Per-sample Fisher information of the dataset at `theta`.
///
/// Linear: X'X / (n sigma^2), independent of `theta`.
/// Logistic: (1/n) sum_i s(t_i)(1 - s(t_i)) x_i x_i' with t_i = x_i'theta.
pub fn fisher_per_sample(
    data: &Dataset,
    theta: &DVector<f64>,
    noise: &NoiseSpec,
) -> Result<DMatrix<f64>, ModelError> {
    let n = data.n() as f64;
    match data.family {
        Family::Linear => {
            check_dims(data, theta)?;
            Ok(data.features.tr_mul(&data.features) / (n * noise.sigma2))
        }
        Family::Logistic => Ok(nll_hessian(data, theta, noise)? / n),
    }
}

/// Expected per-sample Fisher information at `theta` when features are drawn
/// from the standard normal distribution.
///
/// Linear: I_d / sigma^2. Logistic: by rotational symmetry the matrix is
/// b I_d + (a - b) u u' with u = theta / |theta|, where a and b are Gaussian
/// expectations of s(|theta| z)(1 - s(|theta| z)) weighted by z^2 and 1; they
/// are computed by trapezoidal quadrature, which is effectively exact for
/// integrands with Gaussian decay.
pub fn nominal_fisher_per_sample(
    family: Family,
    theta: &DVector<f64>,
    noise: &NoiseSpec,
) -> DMatrix<f64> {
    let d = theta.len();
    match family {
        Family::Linear => DMatrix::identity(d, d) / noise.sigma2,
        Family::Logistic => {
            let m = theta.norm();
            if m < 1e-14 {
                return DMatrix::identity(d, d) * 0.25;
            }
            let half_width = 12.0;
            let steps = 6144;
            let h = half_width / steps as f64;
            let norm_const = (2.0 * std::f64::consts::PI).sqrt();
            let mut a = 0.0;
            let mut b = 0.0;
            for i in -(steps as i64)..=(steps as i64) {
                let z = i as f64 * h;
                let s = sigmoid(m * z);
                let weighted = s * (1.0 - s) * (-0.5 * z * z).exp() / norm_const;
                let trapezoid = if i.unsigned_abs() == steps { 0.5 } else { 1.0 };
                a += trapezoid * weighted * z * z;
                b += trapezoid * weighted;
            }
            a *= h;
            b *= h;
            let u = theta / m;
            let mut fisher = DMatrix::identity(d, d) * b;
            fisher += (&u * u.transpose()) * (a - b);
            fisher
        }
    }
}

/// Draws a dataset of size `n` from the family at `theta`, with independent
/// standard normal features.
pub fn generate_dataset(
    rng: RngStream,
    family: Family,
    theta: &DVector<f64>,
    n: usize,
    noise: &NoiseSpec,
) -> Dataset {
    assert!(n >= 1, "need at least one sample");
    let d = theta.len();
    assert!(d >= 1, "need at least one feature");
    let mut r = rng.rng();

    let mut features = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            features[(i, j)] = standard_normal(&mut r);
        }
    }
    let t = &features * theta;
    let responses = match family {
        Family::Linear => {
            let sd = noise.sigma2.sqrt();
            DVector::from_fn(n, |i, _| t[i] + sd * standard_normal(&mut r))
        }
        Family::Logistic => DVector::from_fn(n, |i, _| {
            if r.random::<f64>() < sigmoid(t[i]) {
                1.0
            } else {
                -1.0
            }
        }),
    };
    Dataset {
        features,
        responses,
        family,
    }
}
