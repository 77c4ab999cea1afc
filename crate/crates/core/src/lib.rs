//! Discount-factor dynamic linear models for evaluating longitudinal
//! surrogate markers in two-arm trials.
//!
//! The pipeline is: build a [`design::Panel`], turn it into marginal and
//! conditional [`design::ModelSpec`]s, fit them with [`dlm_core::fit`],
//! extract treatment-effect paths and PTE summaries with [`estimators`],
//! get intervals from the recombination bootstrap in [`bootstrap`] and test
//! temporal homogeneity with [`homogeneity`]. [`simgen`] produces synthetic
//! trials with known truth and [`comparators`] holds the OLS and endpoint
//! difference baselines.
//!
//! Every capability has a runnable example under `crates/core/examples/`.

pub mod error;
mod linalg;

pub mod design;
pub mod dlm_core;
pub mod estimators;
pub mod bootstrap;
pub mod homogeneity;
pub mod simgen;
pub mod comparators;
pub mod cli;

pub use error::{Error, Result};
pub use linalg::PackedSym;
