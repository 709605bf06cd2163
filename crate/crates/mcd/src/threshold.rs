//! Threshold resolution for the empirical difference test.
//!
//! Three routes are provided: the weighted non-central chi-squared
//! representation of the squared difference norm, a conservative chi-squared
//! approximation built from the covariance eigenvalue range, and Monte Carlo
//! calibration that simulates the full generate/fit/compare pipeline at a
//! null boundary pair.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::ThresholdMethod;
use crate::models::{generate_dataset, nominal_fisher_per_sample, Dataset, Family, NoiseSpec};
use crate::numstat::{
    eigh, ncx2_quantile, standard_normal, NoncentralChiSquared, NumStatError, RngStream,
    SymmetricEigen,
};

/// Default Monte Carlo calibration budget.
pub const DEFAULT_TRIALS: usize = 10_000;

const MIN_TRIALS: usize = 100;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("singular covariance: smallest eigenvalue {lambda_min:.3e} is not positive")]
    SingularCovariance { lambda_min: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("model fit failed at trial {trial}: {message}")]
    ModelFitFailure { trial: usize, message: String },
    #[error(transparent)]
    Numeric(#[from] NumStatError),
}

/// Describes the sampling setup used for nominal covariances and Monte Carlo
/// calibration: dimension, sample counts, noise, and the base parameter the
/// null pair is anchored at.
#[derive(Debug, Clone)]
pub struct DesignSpec {
    pub d: usize,
    pub n: usize,
    pub n_prime: usize,
    pub noise: NoiseSpec,
    pub theta_base: DVector<f64>,
}

impl DesignSpec {
    pub fn new(
        d: usize,
        n: usize,
        n_prime: usize,
        noise: NoiseSpec,
        theta_base: DVector<f64>,
    ) -> Result<Self, ThresholdError> {
        if d == 0 {
            return Err(ThresholdError::DomainError(
                "dimension must be at least 1".into(),
            ));
        }
        if n < d + 2 || n_prime < d + 2 {
            return Err(ThresholdError::DomainError(format!(
                "sample counts must be at least d + 2 = {} for a stable nominal covariance, \
                 got n = {n}, n' = {n_prime}",
                d + 2
            )));
        }
        if theta_base.len() != d {
            return Err(ThresholdError::DimensionMismatch(format!(
                "theta_base has {} entries, expected {d}",
                theta_base.len()
            )));
        }
        Ok(DesignSpec {
            d,
            n,
            n_prime,
            noise,
            theta_base,
        })
    }
}

/// The squared difference norm as a weighted sum of squared shifted normals:
/// |G|^2 with G ~ N(shift, Sigma) has the law of sum_i weights_i (U_i + b_i)^2
/// with U_i independent standard normal.
#[derive(Debug, Clone)]
pub struct QuadFormRepresentation {
    pub weights: DVector<f64>,
    pub offsets: DVector<f64>,
    pub total_noncentrality: f64,
}

impl QuadFormRepresentation {
    /// Draws one realization of the weighted sum.
    pub fn sample_squared_norm(&self, rng: &mut ChaCha8Rng) -> f64 {
        let mut total = 0.0;
        for i in 0..self.weights.len() {
            let u = standard_normal(rng) + self.offsets[i];
            total += self.weights[i] * u * u;
        }
        total
    }
}

/// Diagnostics attached to a resolved threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdDiagnostics {
    MonteCarlo { trials: usize, std_err: f64 },
    Chi2 {
        lambda_max: f64,
        lambda_min: f64,
        noncentrality_bound: f64,
    },
}

/// A resolved detection threshold together with how it was obtained.
#[derive(Debug, Clone)]
pub struct ThresholdReport {
    pub eta: f64,
    pub method: ThresholdMethod,
    pub alpha: f64,
    pub diagnostics: ThresholdDiagnostics,
}

/// Estimated raise probability with its binomial standard error.
#[derive(Debug, Clone, Copy)]
pub struct FalseAlarmEstimate {
    pub probability: f64,
    pub std_err: f64,
}

fn check_alpha(alpha: f64) -> Result<(), ThresholdError> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(ThresholdError::DomainError(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_trials(trials: usize) -> Result<(), ThresholdError> {
    if trials < MIN_TRIALS {
        return Err(ThresholdError::DomainError(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<(), ThresholdError> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(ThresholdError::DomainError(format!(
            "rho must be non-negative, got {rho}"
        )));
    }
    Ok(())
}

/// Rotates and scales a mean shift into the eigenbasis of a covariance,
/// giving the offsets of the weighted chi-squared representation.
pub fn quadform_representation(
    sigma_delta_eigen: &SymmetricEigen,
    mean_shift: &DVector<f64>,
) -> Result<QuadFormRepresentation, ThresholdError> {
    let d = sigma_delta_eigen.dim();
    if mean_shift.len() != d {
        return Err(ThresholdError::DimensionMismatch(format!(
            "mean shift has {} entries, covariance is {d}x{d}",
            mean_shift.len()
        )));
    }
    let lambda_min = sigma_delta_eigen.lambda_min();
    if lambda_min <= 0.0 {
        return Err(ThresholdError::SingularCovariance { lambda_min });
    }
    let rotated = &sigma_delta_eigen.eigenvectors * mean_shift;
    let weights = sigma_delta_eigen.eigenvalues.clone();
    let offsets = DVector::from_fn(d, |i, _| rotated[i] / weights[i].sqrt());
    let total_noncentrality = offsets.norm_squared();
    Ok(QuadFormRepresentation {
        weights,
        offsets,
        total_noncentrality,
    })
}

/// Conservative chi-squared threshold from the covariance eigenvalue range:
/// eta^2 = lambda_max * q with q the (1 - alpha)-quantile of the non-central
/// chi-squared with d degrees of freedom and noncentrality rho^2 / lambda_min.
pub fn chi2_threshold(
    sigma_delta_eigen: &SymmetricEigen,
    rho: f64,
    alpha: f64,
    d: usize,
) -> Result<ThresholdReport, ThresholdError> {
    check_alpha(alpha)?;
    check_rho(rho)?;
    if sigma_delta_eigen.dim() != d {
        return Err(ThresholdError::DimensionMismatch(format!(
            "covariance is {}x{}, expected dimension {d}",
            sigma_delta_eigen.dim(),
            sigma_delta_eigen.dim()
        )));
    }
    let lambda_min = sigma_delta_eigen.lambda_min();
    let lambda_max = sigma_delta_eigen.lambda_max();
    if lambda_min <= 0.0 {
        return Err(ThresholdError::SingularCovariance { lambda_min });
    }
    let noncentrality_bound = rho * rho / lambda_min;
    let dist = NoncentralChiSquared::new(d as u32, noncentrality_bound)?;
    let q = ncx2_quantile(&dist, 1.0 - alpha)?;
    Ok(ThresholdReport {
        eta: (lambda_max * q).sqrt(),
        method: ThresholdMethod::Chi2Approx,
        alpha,
        diagnostics: ThresholdDiagnostics::Chi2 {
            lambda_max,
            lambda_min,
            noncentrality_bound,
        },
    })
}

/// Nominal covariance of the MLE difference under the design spec, with
/// standard normal features and effective sample counts n - d - 1.
///
/// For the linear family this matches the exact mean of the realized
/// covariance sigma^2 (X'X)^{-1} + sigma^2 (X''X')^{-1} over redrawn designs;
/// for the logistic family the same adjustment serves as a first-order
/// finite-sample correction to the asymptotic I(theta)^{-1}/n form.
pub fn nominal_sigma_delta(
    family: Family,
    design: &DesignSpec,
) -> Result<SymmetricEigen, ThresholdError> {
    let fisher = nominal_fisher_per_sample(family, &design.theta_base, &design.noise);
    let eig = eigh(&fisher)?;
    let lambda_min = eig.lambda_min();
    if lambda_min <= 0.0 {
        return Err(ThresholdError::SingularCovariance { lambda_min });
    }
    let effective = |count: usize| (count - design.d - 1) as f64;
    let scale = 1.0 / effective(design.n) + 1.0 / effective(design.n_prime);
    let sigma = eig.inverse() * scale;
    Ok(eigh(&sigma)?)
}

/// The calibration pair at separation rho, anchored at the base parameter.
///
/// Linear: the partner shifts along the heaviest-tailed direction of the
/// nominal covariance. Logistic: the partner is a rotation of the base
/// parameter at chord rho, so both endpoints keep the Fisher spectrum the
/// nominal covariance is built from; a norm-changing shift would put the
/// partner where the information differs from the model being calibrated.
pub fn boundary_null_pair(
    family: Family,
    design: &DesignSpec,
    rho: f64,
) -> Result<(DVector<f64>, DVector<f64>), ThresholdError> {
    check_rho(rho)?;
    let theta = design.theta_base.clone();
    if rho == 0.0 {
        return Ok((theta.clone(), theta));
    }
    let eigen = nominal_sigma_delta(family, design)?;
    match family {
        Family::Linear => {
            let direction = eigen.eigenvectors.row(0).transpose();
            let theta_prime = &theta + direction * rho;
            Ok((theta, theta_prime))
        }
        Family::Logistic => {
            let m = theta.norm();
            if rho > 2.0 * m {
                return Err(ThresholdError::DomainError(format!(
                    "separation {rho} exceeds the diameter 2|theta_base| = {}",
                    2.0 * m
                )));
            }
            if design.d < 2 {
                return Err(ThresholdError::DomainError(
                    "logistic calibration rotation needs dimension at least 2".into(),
                ));
            }
            let radial = &theta / m;
            // First eigenvector orthogonal to the radial direction; the
            // tangential eigenvalues are all equal, so the choice of
            // rotation plane does not affect the statistic's law.
            let mut tangent = None;
            for i in 0..design.d {
                let row = eigen.eigenvectors.row(i).transpose();
                let residual = &row - &radial * radial.dot(&row);
                if residual.norm() > 1e-6 {
                    tangent = Some(residual.normalize());
                    break;
                }
            }
            let tangent = tangent.expect("an orthonormal basis spans the tangent space");
            let phi = 2.0 * (rho / (2.0 * m)).asin();
            let theta_prime = (radial * phi.cos() + tangent * phi.sin()) * m;
            Ok((theta, theta_prime))
        }
    }
}

/// Runs `trials` independent generate/fit replications at the given parameter
/// pair and evaluates `statistic` on each dataset pair. Trial `t` draws from
/// `rng.derive(t)`, with the pre and post datasets on substreams 0 and 1, so
/// results do not depend on scheduling.
pub(crate) fn mc_pair_statistics<F>(
    family: Family,
    design: &DesignSpec,
    theta: &DVector<f64>,
    theta_prime: &DVector<f64>,
    trials: usize,
    rng: RngStream,
    statistic: F,
) -> Result<Vec<f64>, ThresholdError>
where
    F: Fn(&Dataset, &Dataset) -> Result<f64, String> + Sync,
{
    let outcomes: Vec<Result<f64, String>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let stream = rng.derive(t as u64);
            let pre = generate_dataset(
                stream.derive(0),
                family,
                theta,
                design.n,
                &design.noise,
            );
            let post = generate_dataset(
                stream.derive(1),
                family,
                theta_prime,
                design.n_prime,
                &design.noise,
            );
            statistic(&pre, &post)
        })
        .collect();
    outcomes
        .into_iter()
        .enumerate()
        .map(|(trial, outcome)| {
            outcome.map_err(|message| ThresholdError::ModelFitFailure { trial, message })
        })
        .collect()
}

fn difference_norm(pre: &Dataset, post: &Dataset, noise: &NoiseSpec) -> Result<f64, String> {
    let pre_fit = crate::models::fit_mle(pre, noise).map_err(|e| e.to_string())?;
    let post_fit = crate::models::fit_mle(post, noise).map_err(|e| e.to_string())?;
    Ok((&post_fit.theta_hat - &pre_fit.theta_hat).norm())
}

/// 1-based index of the upper empirical (1 - alpha)-quantile.
pub(crate) fn quantile_index(trials: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * trials as f64;
    // Guard against the product landing a hair above an integer.
    let index = (raw - 1e-9).ceil() as usize;
    index.clamp(1, trials)
}

pub(crate) fn upper_order_statistic(statistics: &mut [f64], alpha: f64) -> f64 {
    statistics.sort_unstable_by(f64::total_cmp);
    statistics[quantile_index(statistics.len(), alpha) - 1]
}

/// Monte Carlo threshold: simulates the pipeline at the boundary null pair
/// and returns the empirical (1 - alpha)-quantile of the difference norm.
pub fn mc_threshold(
    family: Family,
    design: &DesignSpec,
    rho: f64,
    alpha: f64,
    trials: usize,
    rng: RngStream,
) -> Result<ThresholdReport, ThresholdError> {
    check_alpha(alpha)?;
    check_trials(trials)?;
    let (theta, theta_prime) = boundary_null_pair(family, design, rho)?;
    let mut statistics = mc_pair_statistics(
        family,
        design,
        &theta,
        &theta_prime,
        trials,
        rng,
        |pre, post| difference_norm(pre, post, &design.noise),
    )?;
    let eta = upper_order_statistic(&mut statistics, alpha);
    Ok(ThresholdReport {
        eta,
        method: ThresholdMethod::MonteCarlo,
        alpha,
        diagnostics: ThresholdDiagnostics::MonteCarlo {
            trials,
            std_err: (alpha * (1.0 - alpha) / trials as f64).sqrt(),
        },
    })
}

/// Fraction of trials whose difference norm reaches eta, with binomial
/// standard error. Serves as a false alarm estimate for null pairs and a
/// detection estimate for alternative pairs.
pub fn empirical_false_alarm(
    family: Family,
    design: &DesignSpec,
    theta: &DVector<f64>,
    theta_prime: &DVector<f64>,
    eta: f64,
    trials: usize,
    rng: RngStream,
) -> Result<FalseAlarmEstimate, ThresholdError> {
    check_trials(trials)?;
    if theta.len() != design.d || theta_prime.len() != design.d {
        return Err(ThresholdError::DimensionMismatch(format!(
            "parameter pair has {} and {} entries, design dimension is {}",
            theta.len(),
            theta_prime.len(),
            design.d
        )));
    }
    let statistics = mc_pair_statistics(
        family,
        design,
        theta,
        theta_prime,
        trials,
        rng,
        |pre, post| difference_norm(pre, post, &design.noise),
    )?;
    let raised = statistics.iter().filter(|&&s| s >= eta).count();
    let probability = raised as f64 / trials as f64;
    Ok(FalseAlarmEstimate {
        probability,
        std_err: (probability * (1.0 - probability) / trials as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numstat::ncx2_cdf;
    use nalgebra::DMatrix;

    fn eigen_of(matrix: &DMatrix<f64>) -> SymmetricEigen {
        eigh(matrix).unwrap()
    }

    fn random_covariance(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let factor = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
        let mut cov = factor.tr_mul(&factor) / d as f64;
        for i in 0..d {
            cov[(i, i)] += 0.2;
        }
        cov
    }

    fn two_sample_ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_unstable_by(f64::total_cmp);
        b.sort_unstable_by(f64::total_cmp);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let mut max_gap = 0.0_f64;
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            max_gap = max_gap.max((i as f64 / na - j as f64 / nb).abs());
        }
        max_gap
    }

    #[test]
    fn quadform_zero_shift_is_central() {
        let eigen = eigen_of(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.5])));
        let rep = quadform_representation(&eigen, &DVector::zeros(3)).unwrap();
        assert_eq!(rep.offsets, DVector::zeros(3));
        assert_eq!(rep.total_noncentrality, 0.0);
        assert!(rep.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn quadform_isotropic_case() {
        let eigen = eigen_of(&DMatrix::identity(3, 3));
        let shift = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let rep = quadform_representation(&eigen, &shift).unwrap();
        assert!(rep.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        assert!((rep.total_noncentrality - 9.0).abs() < 1e-12);
    }

    #[test]
    fn quadform_diagonal_hand_example() {
        let eigen = eigen_of(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])));
        let shift = DVector::from_vec(vec![2.0, 0.0]);
        let rep = quadform_representation(&eigen, &shift).unwrap();
        assert!((rep.weights[0] - 4.0).abs() < 1e-12);
        assert!((rep.weights[1] - 1.0).abs() < 1e-12);
        assert!((rep.offsets[0] - 1.0).abs() < 1e-12);
        assert!(rep.offsets[1].abs() < 1e-12);
        assert!((rep.total_noncentrality - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadform_reconstruction_invariant() {
        let mut r = RngStream::new(301).rng();
        for _ in 0..20 {
            let d = 5;
            let cov = random_covariance(&mut r, d);
            let eigen = eigen_of(&cov);
            let shift = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            let rep = quadform_representation(&eigen, &shift).unwrap();
            // Undo the rotation and scaling: P' Lambda^{1/2} b = shift.
            let scaled = DVector::from_fn(d, |i, _| rep.offsets[i] * rep.weights[i].sqrt());
            let rebuilt = eigen.eigenvectors.tr_mul(&scaled);
            assert!((&rebuilt - &shift).norm() <= 1e-9);
        }
    }

    #[test]
    fn quadform_rejects_singular_covariance() {
        let eigen = eigen_of(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])));
        assert!(matches!(
            quadform_representation(&eigen, &DVector::zeros(2)),
            Err(ThresholdError::SingularCovariance { .. })
        ));
        let eigen = eigen_of(&DMatrix::identity(2, 2));
        assert!(matches!(
            quadform_representation(&eigen, &DVector::zeros(3)),
            Err(ThresholdError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn chi2_threshold_closed_form_case() {
        // Central k = 2: the squared threshold inverts 1 - exp(-x/2), so at
        // alpha = 1/e the quantile is exactly 2.
        let eigen = eigen_of(&DMatrix::identity(2, 2));
        let report = chi2_threshold(&eigen, 0.0, (-1.0_f64).exp(), 2).unwrap();
        assert!(
            (report.eta * report.eta - 2.0).abs() < 1e-10,
            "eta^2 = {}",
            report.eta * report.eta
        );
        match report.diagnostics {
            ThresholdDiagnostics::Chi2 {
                lambda_max,
                lambda_min,
                noncentrality_bound,
            } => {
                assert!((lambda_max - 1.0).abs() < 1e-12);
                assert!((lambda_min - 1.0).abs() < 1e-12);
                assert_eq!(noncentrality_bound, 0.0);
            }
            other => panic!("expected chi2 diagnostics, got {other:?}"),
        }
    }

    #[test]
    fn chi2_threshold_isotropic_scaling() {
        let c = 2.5;
        let d = 3;
        let eigen = eigen_of(&(DMatrix::identity(d, d) * c));
        let rho = 0.7;
        let alpha = 0.1;
        let report = chi2_threshold(&eigen, rho, alpha, d).unwrap();
        let dist = NoncentralChiSquared::new(d as u32, rho * rho / c).unwrap();
        let q = ncx2_quantile(&dist, 1.0 - alpha).unwrap();
        assert!((report.eta * report.eta - c * q).abs() < 1e-10);
    }

    #[test]
    fn chi2_threshold_golden_ten_dimensional() {
        // Covariance from a fixed pair of 40-sample standard normal designs
        // at unit noise, the configuration the experiments use.
        let noise = NoiseSpec::unit();
        let theta = DVector::zeros(10);
        let pre = generate_dataset(RngStream::new(404).derive(0), Family::Linear, &theta, 40, &noise);
        let post = generate_dataset(RngStream::new(404).derive(1), Family::Linear, &theta, 40, &noise);
        let sigma = pre.features.tr_mul(&pre.features).try_inverse().unwrap()
            + post.features.tr_mul(&post.features).try_inverse().unwrap();
        let eigen = eigen_of(&sigma);
        let report = chi2_threshold(&eigen, 1.0, 0.1, 10).unwrap();
        let golden = 2.481_351_997_523_249;
        assert!(
            (report.eta - golden).abs() < 1e-9,
            "eta {} vs golden {golden}",
            report.eta
        );

        // Cross-check: the bounding variable lambda_max * chi2(d, rho^2 /
        // lambda_min) should exceed eta^2 with probability alpha.
        let dist = NoncentralChiSquared::new(10, 1.0 / eigen.lambda_min()).unwrap();
        let mut r = RngStream::new(405).rng();
        let draws = 1_000_000;
        let mut exceed = 0_u64;
        let threshold = report.eta * report.eta / eigen.lambda_max();
        let offset = (dist.noncentrality / 10.0).sqrt();
        for _ in 0..draws {
            let mut sum = 0.0;
            for _ in 0..10 {
                let u = standard_normal(&mut r) + offset;
                sum += u * u;
            }
            if sum >= threshold {
                exceed += 1;
            }
        }
        let p = exceed as f64 / draws as f64;
        let se = (0.1 * 0.9 / draws as f64).sqrt();
        assert!(
            (p - 0.1).abs() < 3.0 * se + 1e-3,
            "exceedance {p} vs alpha 0.1"
        );
    }

    #[test]
    fn chi2_threshold_monotone_in_alpha_and_rho() {
        let mut r = RngStream::new(302).rng();
        let cov = random_covariance(&mut r, 4);
        let eigen = eigen_of(&cov);
        let mut previous = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.2, 0.4, 0.6] {
            let eta = chi2_threshold(&eigen, 0.5, alpha, 4).unwrap().eta;
            assert!(eta <= previous + 1e-12, "eta not non-increasing in alpha");
            previous = eta;
        }
        let mut previous = 0.0;
        for step in 0..6 {
            let rho = 0.3 * step as f64;
            let eta = chi2_threshold(&eigen, rho, 0.1, 4).unwrap().eta;
            assert!(eta >= previous - 1e-12, "eta not non-decreasing in rho");
            previous = eta;
        }
    }

    #[test]
    fn chi2_threshold_rejects_bad_inputs() {
        let eigen = eigen_of(&DMatrix::identity(2, 2));
        assert!(matches!(
            chi2_threshold(&eigen, 0.5, 0.0, 2),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            chi2_threshold(&eigen, -0.5, 0.1, 2),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            chi2_threshold(&eigen, 0.5, 0.1, 3),
            Err(ThresholdError::DimensionMismatch(_))
        ));
        let singular = eigen_of(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])));
        assert!(matches!(
            chi2_threshold(&singular, 0.5, 0.1, 2),
            Err(ThresholdError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn design_spec_validation() {
        let noise = NoiseSpec::unit();
        assert!(DesignSpec::new(3, 30, 40, noise, DVector::zeros(3)).is_ok());
        assert!(matches!(
            DesignSpec::new(0, 30, 40, noise, DVector::zeros(0)),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            DesignSpec::new(3, 4, 40, noise, DVector::zeros(3)),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            DesignSpec::new(3, 30, 40, noise, DVector::zeros(2)),
            Err(ThresholdError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn nominal_sigma_delta_linear_value() {
        let noise = NoiseSpec::new(2.0).unwrap();
        let design = DesignSpec::new(3, 33, 23, noise, DVector::zeros(3)).unwrap();
        let eigen = nominal_sigma_delta(Family::Linear, &design).unwrap();
        // sigma^2 I with effective counts 33 - 4 = 29 and 23 - 4 = 19.
        let expected = 2.0 * (1.0 / 29.0 + 1.0 / 19.0);
        assert!((eigen.lambda_max() - expected).abs() < 1e-12);
        assert!((eigen.lambda_min() - expected).abs() < 1e-12);
    }

    #[test]
    fn nominal_sigma_delta_logistic_radial_direction_is_heaviest() {
        let theta = DVector::from_vec(vec![0.6, -0.8]);
        let design = DesignSpec::new(2, 60, 60, NoiseSpec::unit(), theta.clone()).unwrap();
        let eigen = nominal_sigma_delta(Family::Logistic, &design).unwrap();
        assert!(eigen.lambda_max() > eigen.lambda_min());
        // The top eigenvector should align with theta.
        let top = eigen.eigenvectors.row(0).transpose();
        let cosine = top.dot(&theta).abs() / theta.norm();
        assert!((cosine - 1.0).abs() < 1e-9, "cosine {cosine}");
    }

    #[test]
    fn boundary_pair_sits_rho_apart() {
        let design = DesignSpec::new(4, 40, 40, NoiseSpec::unit(), DVector::zeros(4)).unwrap();
        let (theta, theta_prime) = boundary_null_pair(Family::Linear, &design, 0.9).unwrap();
        assert!(((&theta_prime - &theta).norm() - 0.9).abs() < 1e-12);
        assert_eq!(theta, DVector::zeros(4));
    }

    #[test]
    fn boundary_pair_logistic_is_an_equal_norm_rotation() {
        let theta = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let design = DesignSpec::new(3, 40, 40, NoiseSpec::unit(), theta).unwrap();
        let (a, b) = boundary_null_pair(Family::Logistic, &design, 0.5).unwrap();
        assert!(((&b - &a).norm() - 0.5).abs() < 1e-12);
        assert!((b.norm() - a.norm()).abs() < 1e-12);

        let tiny = DesignSpec::new(3, 40, 40, NoiseSpec::unit(), DVector::zeros(3)).unwrap();
        assert!(matches!(
            boundary_null_pair(Family::Logistic, &tiny, 0.5),
            Err(ThresholdError::DomainError(_))
        ));
    }

    #[test]
    fn quantile_index_convention() {
        assert_eq!(quantile_index(101, 0.5), 51);
        assert_eq!(quantile_index(10_000, 0.1), 9000);
        assert_eq!(quantile_index(1000, 0.05), 950);
        assert_eq!(quantile_index(100, 0.999), 1);
        assert_eq!(quantile_index(100, 1e-9), 100);
    }

    #[test]
    fn mc_threshold_is_deterministic_per_seed() {
        let design = DesignSpec::new(2, 25, 25, NoiseSpec::unit(), DVector::zeros(2)).unwrap();
        let a = mc_threshold(Family::Linear, &design, 0.5, 0.2, 400, RngStream::new(9)).unwrap();
        let b = mc_threshold(Family::Linear, &design, 0.5, 0.2, 400, RngStream::new(9)).unwrap();
        let c = mc_threshold(Family::Linear, &design, 0.5, 0.2, 400, RngStream::new(10)).unwrap();
        assert_eq!(a.eta, b.eta);
        assert_ne!(a.eta, c.eta);
        assert!(a.eta > 0.0);
        match a.diagnostics {
            ThresholdDiagnostics::MonteCarlo { trials, std_err } => {
                assert_eq!(trials, 400);
                assert!((std_err - (0.2_f64 * 0.8 / 400.0).sqrt()).abs() < 1e-15);
            }
            other => panic!("expected MC diagnostics, got {other:?}"),
        }
    }

    #[test]
    fn mc_threshold_matches_scaled_normal_quantile_at_null() {
        // d = 1 at rho = 0: the difference of the two least-squares slopes is
        // a centered scale mixture whose effective variance is
        // sigma^2 (1/(n-2) + 1/(n'-2)), so eta should sit near that scale
        // times the 0.9 standard normal quantile for alpha = 0.2.
        let n = 1000;
        let design = DesignSpec::new(1, n, n, NoiseSpec::unit(), DVector::zeros(1)).unwrap();
        let trials = 2000;
        let alpha = 0.2;
        let report =
            mc_threshold(Family::Linear, &design, 0.0, alpha, trials, RngStream::new(77)).unwrap();
        let scale = (2.0 / (n as f64 - 2.0)).sqrt();
        let z_09 = 1.281_551_565_544_600_4;
        let expected = scale * z_09;
        // Three quantile standard errors: sqrt(alpha (1-alpha) / trials)
        // divided by the statistic density 2 phi(z) / scale at the quantile.
        let density = 2.0 * (-0.5 * z_09 * z_09).exp() / (2.0 * std::f64::consts::PI).sqrt() / scale;
        let band = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt() / density;
        assert!(
            (report.eta - expected).abs() < band,
            "eta {} vs expected {expected} (band {band})",
            report.eta
        );
    }

    #[test]
    fn mc_threshold_median_couples_with_false_alarm_count() {
        // With 101 trials and alpha = 0.5 the threshold is the sample median;
        // replaying the same stream, exactly 51 of the 101 statistics reach it.
        let design = DesignSpec::new(2, 30, 30, NoiseSpec::unit(), DVector::zeros(2)).unwrap();
        let rho = 0.6;
        let report =
            mc_threshold(Family::Linear, &design, rho, 0.5, 101, RngStream::new(33)).unwrap();
        let (theta, theta_prime) = boundary_null_pair(Family::Linear, &design, rho).unwrap();
        let estimate = empirical_false_alarm(
            Family::Linear,
            &design,
            &theta,
            &theta_prime,
            report.eta,
            101,
            RngStream::new(33),
        )
        .unwrap();
        assert!((estimate.probability - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_false_alarm_trivial_thresholds() {
        let design = DesignSpec::new(2, 20, 20, NoiseSpec::unit(), DVector::zeros(2)).unwrap();
        let theta = DVector::zeros(2);
        let zero = empirical_false_alarm(
            Family::Linear,
            &design,
            &theta,
            &theta,
            0.0,
            100,
            RngStream::new(1),
        )
        .unwrap();
        assert_eq!(zero.probability, 1.0);
        assert_eq!(zero.std_err, 0.0);
        let huge = empirical_false_alarm(
            Family::Linear,
            &design,
            &theta,
            &theta,
            1e9,
            100,
            RngStream::new(1),
        )
        .unwrap();
        assert_eq!(huge.probability, 0.0);
    }

    #[test]
    fn mc_calibration_is_self_consistent_at_rho_zero() {
        // Calibrate at rho = 0 and re-estimate the false alarm at the same
        // point with an independent stream: should land within three
        // standard errors of alpha.
        let design = DesignSpec::new(2, 50, 50, NoiseSpec::unit(), DVector::zeros(2)).unwrap();
        let alpha = 0.2;
        let trials = 2000;
        let report =
            mc_threshold(Family::Linear, &design, 0.0, alpha, trials, RngStream::new(55)).unwrap();
        let theta = DVector::zeros(2);
        let estimate = empirical_false_alarm(
            Family::Linear,
            &design,
            &theta,
            &theta,
            report.eta,
            trials,
            RngStream::new(56),
        )
        .unwrap();
        let se = (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(
            (estimate.probability - alpha).abs() <= 3.0 * (se * se * 2.0).sqrt(),
            "false alarm {} vs alpha {alpha}",
            estimate.probability
        );
    }

    #[test]
    fn theorem_one_fidelity() {
        let mut r = RngStream::new(303).rng();
        let d = 6;
        let cov = random_covariance(&mut r, d);
        let eigen = eigen_of(&cov);
        let shift = DVector::from_fn(d, |_, _| standard_normal(&mut r));
        let rep = quadform_representation(&eigen, &shift).unwrap();

        let draws = 100_000;
        let gaussian: Vec<f64> = (0..draws)
            .map(|i| {
                let g = crate::numstat::sample_gaussian_vector(
                    RngStream::new(304).derive(i),
                    &shift,
                    &eigen,
                )
                .unwrap();
                g.norm_squared()
            })
            .collect();
        let mut rq = RngStream::new(305).rng();
        let weighted: Vec<f64> = (0..draws).map(|_| rep.sample_squared_norm(&mut rq)).collect();

        let ks = two_sample_ks(gaussian, weighted);
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn bounding_chain_holds_for_random_instances() {
        let mut r = RngStream::new(306).rng();
        for instance in 0..20 {
            let d = 2 + (instance % 5);
            let cov = random_covariance(&mut r, d);
            let eigen = eigen_of(&cov);
            let shift = DVector::from_fn(d, |_, _| 0.8 * standard_normal(&mut r));
            let rep = quadform_representation(&eigen, &shift).unwrap();
            let t = (eigen.lambda_max() * d as f64) * (0.5 + standard_normal(&mut r).abs());

            let draws = 20_000;
            let mut rq = RngStream::new(307).derive(instance as u64).rng();
            let exceed = (0..draws)
                .filter(|_| rep.sample_squared_norm(&mut rq) >= t)
                .count();
            let p = exceed as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-4);

            let dist =
                NoncentralChiSquared::new(d as u32, rep.total_noncentrality).unwrap();
            let bound = 1.0 - ncx2_cdf(&dist, t / eigen.lambda_max());
            assert!(
                p <= bound + 3.0 * se,
                "instance {instance}: simulated {p} above bound {bound}"
            );
        }
    }

    #[test]
    fn noncentrality_is_bounded_by_rho_over_lambda_min() {
        let mut r = RngStream::new(308).rng();
        let rho = 1.3;
        for _ in 0..20 {
            let d = 4;
            let cov = random_covariance(&mut r, d);
            let eigen = eigen_of(&cov);
            let mut shift = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            shift *= rho * (0.2 + 0.8 * (standard_normal(&mut r).abs() % 1.0)) / shift.norm();
            assert!(shift.norm() <= rho + 1e-12);
            let rep = quadform_representation(&eigen, &shift).unwrap();
            assert!(rep.total_noncentrality <= rho * rho / eigen.lambda_min() + 1e-9);
        }
    }

    #[test]
    fn chi2_threshold_is_conservative_on_null_grid() {
        let d = 3;
        let noise = NoiseSpec::unit();
        let design = DesignSpec::new(d, 30, 30, noise, DVector::zeros(d)).unwrap();
        let rho = 0.6;
        let alpha = 0.2;
        let eigen = nominal_sigma_delta(Family::Linear, &design).unwrap();
        let eta = chi2_threshold(&eigen, rho, alpha, d).unwrap().eta;

        let trials = 1500;
        let mut r = RngStream::new(309).rng();
        for (i, fraction) in [0.0, 0.4, 0.8, 1.0].into_iter().enumerate() {
            let mut direction = DVector::from_fn(d, |_, _| standard_normal(&mut r));
            direction /= direction.norm();
            let theta = DVector::zeros(d);
            let theta_prime = &theta + direction * (fraction * rho);
            let estimate = empirical_false_alarm(
                Family::Linear,
                &design,
                &theta,
                &theta_prime,
                eta,
                trials,
                RngStream::new(310).derive(i as u64),
            )
            .unwrap();
            let se = (alpha * (1.0 - alpha) / trials as f64).sqrt();
            assert!(
                estimate.probability <= alpha + 3.0 * se,
                "false alarm {} at fraction {fraction} exceeds {alpha} + 3 SE",
                estimate.probability
            );
        }
    }

    #[test]
    fn mc_threshold_rejects_bad_inputs() {
        let design = DesignSpec::new(2, 20, 20, NoiseSpec::unit(), DVector::zeros(2)).unwrap();
        assert!(matches!(
            mc_threshold(Family::Linear, &design, 0.5, 0.2, 99, RngStream::new(1)),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            mc_threshold(Family::Linear, &design, 0.5, 1.0, 400, RngStream::new(1)),
            Err(ThresholdError::DomainError(_))
        ));
        assert!(matches!(
            mc_threshold(Family::Linear, &design, -1.0, 0.2, 400, RngStream::new(1)),
            Err(ThresholdError::DomainError(_))
        ));
    }
}
