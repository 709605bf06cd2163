//! Decision rules for the two-sample change problem.
//!
//! The empirical difference test compares the norm of the MLE difference
//! against a threshold. The GLRT for the linear family solves the constrained
//! likelihood problem on the boundary of the null region. The approximate-GLR
//! upper bound links the two by bounding the GLR statistic with a quadratic
//! in the empirical difference.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::models::{
    fit_mle, neg_log_likelihood, Dataset, Family, FittedModel, ModelError, NoiseSpec,
    CONDITION_LIMIT,
};
use crate::numstat::{eigh, NumStatError, SymmetricEigen};

const ROOT_MAX_DOUBLINGS: usize = 200;
const ROOT_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("singular Fisher estimate: condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}")]
    SingularFisher { cond: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("threshold not resolved; run calibration before deciding")]
    UnresolvedThreshold,
    #[error("singular design: condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}")]
    SingularDesign { cond: f64 },
    #[error("no sign change found for the constraint root after {doublings} doublings")]
    RootBracketFailure { doublings: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Numeric(#[from] NumStatError),
}

fn lift_model_error(err: ModelError) -> DetectorError {
    match err {
        ModelError::SingularDesign { cond } => DetectorError::SingularDesign { cond },
        ModelError::DimensionMismatch(msg) => DetectorError::DimensionMismatch(msg),
        other => DetectorError::Model(other),
    }
}

/// How a detection threshold was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdMethod {
    MonteCarlo,
    Chi2Approx,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMethod::MonteCarlo => write!(f, "monte_carlo"),
            ThresholdMethod::Chi2Approx => write!(f, "chi2_approx"),
        }
    }
}

impl FromStr for ThresholdMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monte_carlo" | "mc" => Ok(ThresholdMethod::MonteCarlo),
            "chi2_approx" | "chi2" => Ok(ThresholdMethod::Chi2Approx),
            other => Err(format!(
                "unknown threshold method {other:?}, expected \"mc\" or \"chi2\""
            )),
        }
    }
}

/// The empirical difference between two fitted models, together with the
/// plug-in covariance of the difference and its eigendecomposition.
#[derive(Debug, Clone)]
pub struct DifferenceStatistic {
    pub delta_theta: DVector<f64>,
    pub norm: f64,
    pub sigma_delta: DMatrix<f64>,
    pub eigen: SymmetricEigen,
}

/// Detection settings: the change magnitude defining the null region, the
/// false alarm budget, and the resolved threshold once calibrated.
#[derive(Debug, Clone)]
pub struct DetectionConfig {
    pub rho: f64,
    pub alpha: f64,
    pub threshold_method: ThresholdMethod,
    pub eta: Option<f64>,
}

impl DetectionConfig {
    pub fn new(
        rho: f64,
        alpha: f64,
        threshold_method: ThresholdMethod,
    ) -> Result<Self, DetectorError> {
        if !rho.is_finite() || rho <= 0.0 {
            return Err(DetectorError::DomainError(format!(
                "rho must be positive, got {rho}"
            )));
        }
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(DetectorError::DomainError(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(DetectionConfig {
            rho,
            alpha,
            threshold_method,
            eta: None,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }
}

/// Outcome of a test: whether an alarm was raised, and the statistic and
/// threshold that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Decision {
    pub raised: bool,
    pub statistic: f64,
    pub threshold_used: f64,
    pub method: ThresholdMethod,
}

/// Result of the constrained GLR computation.
#[derive(Debug, Clone)]
pub struct GlrResult {
    pub glr: f64,
    pub constrained_pair: (DVector<f64>, DVector<f64>),
    pub unconstrained_pair: (DVector<f64>, DVector<f64>),
    pub multiplier: f64,
}

/// Ties decide in favor of raising the alarm.
pub(crate) fn raises(statistic: f64, threshold: f64) -> bool {
    statistic >= threshold
}

fn inverse_checked(fisher: &DMatrix<f64>) -> Result<DMatrix<f64>, DetectorError> {
    let eig = eigh(fisher)?;
    let lambda_min = eig.lambda_min();
    let cond = if lambda_min > 0.0 {
        eig.lambda_max() / lambda_min
    } else {
        f64::INFINITY
    };
    if cond >= CONDITION_LIMIT {
        return Err(DetectorError::SingularFisher { cond });
    }
    Ok(eig.inverse())
}

/// Builds the empirical difference statistic from two fitted models.
///
/// The covariance is the plug-in estimate I^{-1}/n + I'^{-1}/n' with
/// per-sample Fisher information evaluated at the respective MLEs.
pub fn difference_statistic(
    pre: &FittedModel,
    post: &FittedModel,
) -> Result<DifferenceStatistic, DetectorError> {
    let d = pre.theta_hat.len();
    if post.theta_hat.len() != d {
        return Err(DetectorError::DimensionMismatch(format!(
            "pre-change model has {d} parameters, post-change model has {}",
            post.theta_hat.len()
        )));
    }
    let delta_theta = &post.theta_hat - &pre.theta_hat;
    let norm = delta_theta.norm();
    let mut sigma_delta = inverse_checked(&pre.fisher_per_sample)? / pre.n as f64
        + inverse_checked(&post.fisher_per_sample)? / post.n as f64;
    // Round-off can leave the sum very slightly asymmetric.
    sigma_delta = (&sigma_delta + sigma_delta.transpose()) * 0.5;
    let eigen = eigh(&sigma_delta)?;
    Ok(DifferenceStatistic {
        delta_theta,
        norm,
        sigma_delta,
        eigen,
    })
}

/// Empirical difference test: raise when the difference norm reaches eta.
pub fn edt_decide(
    stat: &DifferenceStatistic,
    config: &DetectionConfig,
) -> Result<Decision, DetectorError> {
    let eta = config.eta.ok_or(DetectorError::UnresolvedThreshold)?;
    Ok(Decision {
        raised: raises(stat.norm, eta),
        statistic: stat.norm,
        threshold_used: eta,
        method: config.threshold_method,
    })
}

/// GLRT decision: raise when the GLR statistic reaches tau.
pub fn glr_decide(result: &GlrResult, tau: f64) -> Decision {
    Decision {
        raised: raises(result.glr, tau),
        statistic: result.glr,
        threshold_used: tau,
        method: ThresholdMethod::MonteCarlo,
    }
}

/// The interpolated null-boundary pair: both points sit on the ray from the
/// pre-change MLE along the difference direction, exactly rho apart.
pub fn interpolated_pair(
    theta_hat: &DVector<f64>,
    delta_theta: &DVector<f64>,
    rho: f64,
    mu: f64,
) -> (DVector<f64>, DVector<f64>) {
    let direction = delta_theta / delta_theta.norm();
    let first = theta_hat + &direction * mu;
    let second = theta_hat + &direction * (mu + rho);
    (first, second)
}

/// Quadratic upper bound on the GLR in terms of the empirical difference.
///
/// Returns [mu^2 + (norm - (mu + rho))^2] * lambda_M / (2 sigma^2), or 0 when
/// the MLE pair is already feasible.
pub fn approx_glr_upper_bound(
    stat: &DifferenceStatistic,
    rho: f64,
    mu: f64,
    lambda_m: f64,
    sigma2: f64,
) -> Result<f64, DetectorError> {
    if !lambda_m.is_finite() || lambda_m <= 0.0 {
        return Err(DetectorError::DomainError(format!(
            "lambda_M must be positive, got {lambda_m}"
        )));
    }
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(DetectorError::DomainError(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let hi = (stat.norm - rho).max(0.0);
    if !(0.0..=hi + 1e-12).contains(&mu) {
        return Err(DetectorError::DomainError(format!(
            "mu must lie in [0, {hi}], got {mu}"
        )));
    }
    if stat.norm <= rho {
        return Ok(0.0);
    }
    let overshoot = stat.norm - (mu + rho);
    Ok((mu * mu + overshoot * overshoot) * lambda_m / (2.0 * sigma2))
}

struct ConstrainedSolve {
    theta: DVector<f64>,
    theta_prime: DVector<f64>,
    gap: f64,
}

/// Solves the stationarity system for a given multiplier and reports the
/// distance gap g(lambda) = |theta - theta_prime| - rho.
fn solve_at_multiplier(
    base: &DMatrix<f64>,
    coupling: &DMatrix<f64>,
    rhs: &DVector<f64>,
    d: usize,
    rho: f64,
    lambda: f64,
) -> ConstrainedSolve {
    let system = base + coupling * (2.0 * lambda);
    let chol = Cholesky::new(system).expect("stationarity system is positive definite");
    let z = chol.solve(rhs);
    let theta = DVector::from_fn(d, |i, _| z[i]);
    let theta_prime = DVector::from_fn(d, |i, _| z[d + i]);
    let gap = (&theta - &theta_prime).norm() - rho;
    ConstrainedSolve {
        theta,
        theta_prime,
        gap,
    }
}

/// Derivative of g with respect to lambda, from implicit differentiation of
/// the stationarity system.
fn gap_derivative(
    base: &DMatrix<f64>,
    coupling: &DMatrix<f64>,
    d: usize,
    lambda: f64,
    solve: &ConstrainedSolve,
) -> f64 {
    let w = &solve.theta - &solve.theta_prime;
    let norm = w.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut rhs = DVector::zeros(2 * d);
    for i in 0..d {
        rhs[i] = -2.0 * w[i];
        rhs[d + i] = 2.0 * w[i];
    }
    let system = base + coupling * (2.0 * lambda);
    let chol = Cholesky::new(system).expect("stationarity system is positive definite");
    let dz = chol.solve(&rhs);
    let mut dot = 0.0;
    for i in 0..d {
        dot += w[i] * (dz[i] - dz[d + i]);
    }
    dot / norm
}

/// GLRT statistic for the linear family via constrained least squares.
///
/// Fits both samples, and if the MLE pair violates the null constraint,
/// finds the multiplier for which the stationary pair sits exactly rho
/// apart. The gap g is strictly decreasing in the multiplier, so a doubling
/// bracket followed by bisection with Newton polish converges.
pub fn glr_linear(
    pre_data: &Dataset,
    post_data: &Dataset,
    noise: &NoiseSpec,
    rho: f64,
) -> Result<GlrResult, DetectorError> {
    if pre_data.family != Family::Linear || post_data.family != Family::Linear {
        return Err(DetectorError::DomainError(
            "the GLRT solver applies to the linear family only".into(),
        ));
    }
    if pre_data.d() != post_data.d() {
        return Err(DetectorError::DimensionMismatch(format!(
            "pre-change data has {} features, post-change data has {}",
            pre_data.d(),
            post_data.d()
        )));
    }
    if !rho.is_finite() || rho <= 0.0 {
        return Err(DetectorError::DomainError(format!(
            "rho must be positive, got {rho}"
        )));
    }

    let pre_fit = fit_mle(pre_data, noise).map_err(lift_model_error)?;
    let post_fit = fit_mle(post_data, noise).map_err(lift_model_error)?;
    let mle_obj = pre_fit.neg_log_lik + post_fit.neg_log_lik;
    let unconstrained_pair = (pre_fit.theta_hat.clone(), post_fit.theta_hat.clone());

    let delta_norm = (&post_fit.theta_hat - &pre_fit.theta_hat).norm();
    if delta_norm <= rho {
        return Ok(GlrResult {
            glr: 0.0,
            constrained_pair: unconstrained_pair.clone(),
            unconstrained_pair,
            multiplier: 0.0,
        });
    }

    let d = pre_data.d();
    let a_pre = pre_data.features.tr_mul(&pre_data.features) / noise.sigma2;
    let a_post = post_data.features.tr_mul(&post_data.features) / noise.sigma2;
    let b_pre = pre_data.features.tr_mul(&pre_data.responses) / noise.sigma2;
    let b_post = post_data.features.tr_mul(&post_data.responses) / noise.sigma2;

    let mut base = DMatrix::zeros(2 * d, 2 * d);
    base.view_mut((0, 0), (d, d)).copy_from(&a_pre);
    base.view_mut((d, d), (d, d)).copy_from(&a_post);
    let mut coupling = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        coupling[(i, i)] = 1.0;
        coupling[(d + i, d + i)] = 1.0;
        coupling[(i, d + i)] = -1.0;
        coupling[(d + i, i)] = -1.0;
    }
    let mut rhs = DVector::zeros(2 * d);
    for i in 0..d {
        rhs[i] = b_pre[i];
        rhs[d + i] = b_post[i];
    }

    // Bracket the root: g(0) > 0 since the MLE pair is infeasible, and g
    // decreases toward rho's deficit as lambda grows.
    let tol = 1e-10 * rho.max(1.0);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut hi_solve = solve_at_multiplier(&base, &coupling, &rhs, d, rho, hi);
    let mut doublings = 0;
    while hi_solve.gap > 0.0 {
        doublings += 1;
        if doublings > ROOT_MAX_DOUBLINGS {
            return Err(DetectorError::RootBracketFailure {
                doublings: ROOT_MAX_DOUBLINGS,
            });
        }
        lo = hi;
        hi *= 2.0;
        hi_solve = solve_at_multiplier(&base, &coupling, &rhs, d, rho, hi);
    }

    let mut lambda = 0.5 * (lo + hi);
    let mut current = solve_at_multiplier(&base, &coupling, &rhs, d, rho, lambda);
    for _ in 0..ROOT_MAX_ITERS {
        if current.gap.abs() <= tol {
            break;
        }
        if current.gap > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }

        // Newton step when it stays inside the bracket, bisection otherwise.
        let derivative = gap_derivative(&base, &coupling, d, lambda, &current);
        let newton = lambda - current.gap / derivative;
        lambda = if derivative < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        current = solve_at_multiplier(&base, &coupling, &rhs, d, rho, lambda);
    }

    let constrained_obj = neg_log_likelihood(pre_data, &current.theta, noise)
        .map_err(lift_model_error)?
        + neg_log_likelihood(post_data, &current.theta_prime, noise).map_err(lift_model_error)?;
    let glr = (constrained_obj - mle_obj).max(0.0);

    Ok(GlrResult {
        glr,
        constrained_pair: (current.theta, current.theta_prime),
        unconstrained_pair,
        multiplier: lambda,
    })
}

/// Infinity norm of the stationarity residual at the returned solution.
/// Exposed for diagnostics and testing.
pub fn kkt_residual(
    pre_data: &Dataset,
    post_data: &Dataset,
    noise: &NoiseSpec,
    result: &GlrResult,
) -> f64 {
    let (theta, theta_prime) = &result.constrained_pair;
    let a_pre = pre_data.features.tr_mul(&pre_data.features) / noise.sigma2;
    let a_post = post_data.features.tr_mul(&post_data.features) / noise.sigma2;
    let b_pre = pre_data.features.tr_mul(&pre_data.responses) / noise.sigma2;
    let b_post = post_data.features.tr_mul(&post_data.responses) / noise.sigma2;
    let w = theta - theta_prime;
    let r1 = &a_pre * theta - &b_pre + 2.0 * result.multiplier * &w;
    let r2 = &a_post * theta_prime - &b_post - 2.0 * result.multiplier * &w;
    r1.amax().max(r2.amax())
}
