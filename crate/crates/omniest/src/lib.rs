//! Estimation for hospital-clustered longitudinal outcomes truncated by death.
//!
//! The pipeline: validate a three-level panel (hospital / patient / month),
//! fit a discrete-time dropout hazard to build inverse-probability-of-observation
//! weights, profile out hospital-level nuisance intercepts to estimate the
//! regression coefficients in closed form, and assemble a sandwich covariance
//! with an optional k-means stabilization of the noisy per-hospital intercepts.
//! A Monte Carlo module generates synthetic panels for benchmarking the whole
//! chain against weighted and cluster-weighted GEE baselines.

// Index loops walk several parallel arrays at once here; iterator rewrites
// would hide the row alignment the code depends on.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod dropout;
pub mod estimators;
pub mod inference;
pub mod report;
pub mod simulation;
