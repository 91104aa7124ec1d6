//! Risk estimation for fixed prediction models when the population the model
//! will be deployed in (the *target*, population label `0`) differs from the
//! populations that supplied most of the data (the *sources*).
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: datasets, shift specifications, losses and fold plans.
//! - [`learners`]: regression and classification primitives used to fit
//!   nuisance functions on out-of-fold data.
//! - [`engine`]: the general cross-fit estimator under sequential conditional
//!   invariance, plus the nonparametric baseline.
//! - [`specialized`]: direct estimators for concept shift (features or labels),
//!   covariate shift and label shift, and their efficiency-gain formulas.
//! - [`inference`]: specification test, model comparison and prediction-set
//!   threshold calibration.
//! - [`simlab`]: simulation scenarios and the Monte Carlo harness.
//! - [`cli`]: the command-line surface.

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod inference;
pub mod learners;
pub mod rng;
pub mod simlab;
pub mod specialized;
pub mod stats;

pub use error::{Error, Result};
