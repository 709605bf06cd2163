//! Model change detection between two i.i.d. sample sets.
//!
//! Given a dataset drawn from `p(z|theta)` and a second dataset drawn from
//! `p(z|theta')`, the library decides whether the parameter change
//! `||theta - theta'||` exceeds a magnitude `rho`, subject to a false alarm
//! budget `alpha`. Two decision rules are provided:
//!
//! * the empirical difference test (EDT), which thresholds the norm of the
//!   MLE difference and works for any supported model family, with the
//!   threshold resolved either by Monte Carlo calibration or by a
//!   conservative non-central chi-squared approximation;
//! * a GLRT baseline for linear regression, computed exactly through a
//!   constrained least-squares solve.
//!
//! Module layout:
//!
//! * [`numstat`]: eigendecomposition, chi-squared distribution functions,
//!   seeded RNG substreams.
//! * [`models`]: linear and logistic regression families, MLE fitting,
//!   Fisher information.
//! * [`detector`]: the decision rules themselves.
//! * [`threshold`]: threshold resolution (Monte Carlo and chi-squared).
//! * [`simharness`]: reproducible experiment sweeps over change magnitudes.
//! * [`config`]: the flat key=value run configuration used by the CLI.
//! * [`cli`]: command implementations behind the `mcd` binary.

pub mod cli;
pub mod config;
pub mod detector;
pub mod models;
pub mod numstat;
pub mod simharness;
pub mod threshold;
