//! AIPW estimation of an average treatment effect with a suite of variance
//! estimators (sandwich, jackknife, bootstrap, BCa, HC-corrected sandwich)
//! and a deterministic Monte Carlo harness for studying when they agree.

pub mod calibration;
pub mod dgp;
pub mod diagnostics;
pub mod dist;
pub mod estimator;
pub mod harness;
pub mod numeric;
pub mod nuisance;
pub mod resampling;
pub mod rng;
