//! Numerical laboratory for small-noise McKean-Vlasov SDEs.
//!
//! The crate simulates `dX = b_t(X, L_X) dt + sqrt(eps) sigma_t(X, L_X) dW`
//! with an interacting particle system, computes the Gaussian fluctuation
//! process around the deterministic limit, and evaluates the moderate
//! deviation rate function through its linear skeleton equation.
//!
//! Modules, bottom-up:
//!
//! - [`measure`]: empirical measures, moments, pushforwards and W2.
//! - [`model`]: the [`model::CoefficientModel`] trait, built-in models and
//!   the name-keyed [`model::ModelRegistry`], plus sampled assumption checks.
//! - [`engine`]: time grids, reproducible Brownian noise, the limit ODE,
//!   the particle solver, the fluctuation SDE and the coupled deviation
//!   processes.
//! - [`fluctlab`]: coupled CLT error estimates and rate fits.
//! - [`devlab`]: controls, the skeleton solver, rate function, exit rates,
//!   Girsanov importance sampling and the decay experiments.
//! - [`cli`]: JSON experiment configs and the subcommand registry behind the
//!   `mvlab` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod devlab;
pub mod engine;
pub mod error;
pub mod fluctlab;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod stats;

pub use error::{LabError, Result};
