//! Numerical kernel: symmetric eigendecomposition, central and non-central
//! chi-squared distribution functions, and seeded RNG substreams for
//! reproducible parallel simulation.

use nalgebra::{DMatrix, DVector};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumStatError {
    #[error("matrix not symmetric at ({i},{j}): |a[i,j] - a[j,i]| = {delta:e}")]
    NonSymmetric { i: usize, j: usize, delta: f64 },
    #[error("eigendecomposition did not converge within {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("covariance eigenvalue {value:e} is below the -1e-12 tolerance")]
    NegativeEigenvalue { value: f64 },
}

// ---------------------------------------------------------------------------
// RNG substreams
// ---------------------------------------------------------------------------

/// Handle for one reproducible random stream.
///
/// A `(seed, stream_id)` pair selects one of ChaCha8's 2^64 independent
/// streams. Substreams obtained through [`RngStream::derive`] depend only on
/// the handle and the tag, never on global state, so per-trial streams can be
/// handed to worker threads in any order and replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// SplitMix64 finalizer, used as the substream derivation hash.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard normal draw, pinned to f64 so call sites stay terse.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl RngStream {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream_id: 0 }
    }

    /// Child stream for `tag`. Derivation is a fixed SplitMix64 chain, so
    /// `derive(a).derive(b)` and `derive(b).derive(a)` name distinct streams.
    pub fn derive(&self, tag: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id.rotate_left(17) ^ splitmix64(tag)),
        }
    }

    /// Materialize the generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix, `A = P' Lambda P`.
///
/// Eigenvalues are sorted descending. Rows of `eigenvectors` are the
/// eigenvectors, so `lambda_max` pairs with row 0. Each eigenvector is
/// oriented so that its first entry of magnitude above 1e-12 is positive,
/// which keeps golden outputs stable across runs.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// Rebuild `P' Lambda P`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let p = &self.eigenvectors;
        p.transpose() * DMatrix::from_diagonal(&self.eigenvalues) * p
    }

    /// Inverse through the eigendecomposition, `P' Lambda^{-1} P`.
    /// Caller is responsible for checking the spectrum first.
    pub fn inverse(&self) -> DMatrix<f64> {
        let p = &self.eigenvectors;
        let inv = DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|l| 1.0 / l));
        p.transpose() * DMatrix::from_diagonal(&inv) * p
    }
}

const JACOBI_MAX_SWEEPS: usize = 50;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input must be symmetric within 1e-10 per entry; it is symmetrized
/// before iteration so the rotations see an exactly symmetric matrix.
pub fn eigh(matrix: &DMatrix<f64>) -> Result<SymmetricEigen, NumStatError> {
    let d = matrix.nrows();
    if d == 0 || matrix.ncols() != d {
        return Err(NumStatError::DomainError(format!(
            "eigh needs a nonempty square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let delta = (matrix[(i, j)] - matrix[(j, i)]).abs();
            if delta > SYMMETRY_TOL {
                return Err(NumStatError::NonSymmetric { i, j, delta });
            }
        }
    }

    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
        }
    }
    let mut v = DMatrix::<f64>::identity(d, d);

    let norm = a.norm().max(f64::MIN_POSITIVE);
    let target = norm * 1e-15;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if (2.0 * off).sqrt() <= target {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq.abs() <= norm * 1e-18 {
                    continue;
                }
                // Rotation angle from the stable half-angle formula.
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // One last check: the sweep loop may have hit the budget right after
        // reaching the target.
        let mut off = 0.0_f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if (2.0 * off).sqrt() > target {
            return Err(NumStatError::ConvergenceFailure {
                sweeps: JACOBI_MAX_SWEEPS,
            });
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());

    let eigenvalues = DVector::from_iterator(d, order.iter().map(|&i| a[(i, i)]));
    let mut eigenvectors = DMatrix::zeros(d, d);
    for (row, &col) in order.iter().enumerate() {
        let mut sign = 1.0;
        for k in 0..d {
            let e = v[(k, col)];
            if e.abs() > 1e-12 {
                sign = e.signum();
                break;
            }
        }
        for k in 0..d {
            eigenvectors[(row, k)] = sign * v[(k, col)];
        }
    }

    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}

// ---------------------------------------------------------------------------
// Chi-squared distribution functions
// ---------------------------------------------------------------------------

/// Non-central chi-squared distribution with `dof` degrees of freedom and
/// noncentrality `gamma`. `gamma = 0` is exactly the central distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoncentralChiSquared {
    pub dof: u32,
    pub noncentrality: f64,
}

impl NoncentralChiSquared {
    pub fn new(dof: u32, noncentrality: f64) -> Result<Self, NumStatError> {
        if dof == 0 {
            return Err(NumStatError::DomainError(
                "chi-squared needs dof >= 1".into(),
            ));
        }
        if !noncentrality.is_finite() || noncentrality < 0.0 {
            return Err(NumStatError::DomainError(format!(
                "noncentrality must be finite and >= 0, got {noncentrality}"
            )));
        }
        Ok(NoncentralChiSquared { dof, noncentrality })
    }
}

/// Natural log of the gamma function (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    // Published table digits, beyond f64 precision.
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection for the left half-plane.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion.
/// Valid for x < a + 1 where the series converges quickly.
fn lower_gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..500 {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction
/// (modified Lentz). Valid for x >= a + 1.
fn upper_gamma_cf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Central chi-squared CDF with (possibly non-integer) degrees of freedom k.
/// Series branch below x = k + 1, continued fraction above.
fn central_chi2_cdf(k: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = 0.5 * k;
    let xg = 0.5 * x;
    if x < k + 1.0 {
        lower_gamma_series(a, xg)
    } else {
        1.0 - upper_gamma_cf(a, xg)
    }
}

/// Poisson tail mass dropped from the non-central mixture.
const NCX2_TAIL_TOL: f64 = 1e-12;

/// CDF of the non-central chi-squared distribution.
///
/// Evaluated as the Poisson-weighted mixture of central CDFs,
/// `sum_j exp(-g/2) (g/2)^j / j! F(k + 2j, x)`, summed outward from the
/// modal Poisson weight and truncated once the remaining weight is below
/// 1e-12. Returns 0 for x <= 0.
pub fn ncx2_cdf(dist: &NoncentralChiSquared, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = f64::from(dist.dof);
    let lambda = 0.5 * dist.noncentrality;
    if lambda == 0.0 {
        return central_chi2_cdf(k, x).clamp(0.0, 1.0);
    }

    let mode = lambda.floor() as i64;
    let log_w = |j: i64| -> f64 { -lambda + j as f64 * lambda.ln() - ln_gamma(j as f64 + 1.0) };

    let mut sum = 0.0_f64;
    let mut mass = 0.0_f64;
    // Weight recurrences run outward from the mode, where the weight is
    // largest, to avoid starting the accumulation in the underflow region.
    let w_mode = log_w(mode).exp();
    let mut left = mode;
    let mut w_left = w_mode;
    let mut right = mode;
    let mut w_right = w_mode;
    sum += w_mode * central_chi2_cdf(k + 2.0 * mode as f64, x);
    mass += w_mode;
    while 1.0 - mass >= NCX2_TAIL_TOL {
        let next_left = if left > 0 {
            w_left * left as f64 / lambda
        } else {
            0.0
        };
        let next_right = w_right * lambda / (right + 1) as f64;
        if next_left >= next_right && left > 0 {
            left -= 1;
            w_left = next_left;
            sum += w_left * central_chi2_cdf(k + 2.0 * left as f64, x);
            mass += w_left;
        } else {
            right += 1;
            w_right = next_right;
            sum += w_right * central_chi2_cdf(k + 2.0 * right as f64, x);
            mass += w_right;
        }
        if right - mode > 100_000 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Quantile of the non-central chi-squared distribution by bracketed
/// bisection; the initial bracket covers every probability representable in
/// f64. The result's CDF round-trips to p within 1e-9.
pub fn ncx2_quantile(dist: &NoncentralChiSquared, p: f64) -> Result<f64, NumStatError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumStatError::DomainError(format!(
            "quantile probability must lie in (0,1), got {p}"
        )));
    }
    let k = f64::from(dist.dof);
    let g = dist.noncentrality;
    let mut lo = 0.0_f64;
    let mut hi = k + g + 40.0 * (2.0 * k + 4.0 * g).sqrt() + 40.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ncx2_cdf(dist, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Gaussian sampling
// ---------------------------------------------------------------------------

/// Draw one vector from N(mean, Sigma) where Sigma is given through its
/// eigendecomposition: returns `mean + P' Lambda^{1/2} u` with u standard
/// normal. Deterministic under a fixed stream. Eigenvalues in [-1e-12, 0]
/// are clamped to zero; anything lower is an error.
pub fn sample_gaussian_vector(
    rng: RngStream,
    mean: &DVector<f64>,
    covariance: &SymmetricEigen,
) -> Result<DVector<f64>, NumStatError> {
    let d = covariance.dim();
    if mean.len() != d {
        return Err(NumStatError::DomainError(format!(
            "mean has length {} but covariance is {d}x{d}",
            mean.len()
        )));
    }
    let mut scale = DVector::zeros(d);
    for i in 0..d {
        let l = covariance.eigenvalues[i];
        if l < -1e-12 {
            return Err(NumStatError::NegativeEigenvalue { value: l });
        }
        scale[i] = l.max(0.0).sqrt();
    }
    let mut r = rng.rng();
    let u = DVector::from_iterator(d, (0..d).map(|_| standard_normal(&mut r)));
    let mut z = DVector::zeros(d);
    for i in 0..d {
        z[i] = scale[i] * u[i];
    }
    Ok(mean + covariance.eigenvectors.transpose() * z)
}

// ---------------------------------------------------------------------------
