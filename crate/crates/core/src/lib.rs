//! Targeted minimum loss-based estimation of discrete-time survival curves
//! and their functionals in stratified randomized trials.
//!
//! The crate is organized along the estimation pipeline:
//! [`data`] ingests and expands trial data, [`nuisance`] fits the hazard,
//! censoring and treatment models, [`tmle`] targets the survival curve and
//! computes influence functions and variances, [`estimands`] turns curves
//! into contrasts, [`sim`] runs the simulation study and [`mean_outcome`]
//! handles scalar outcomes.

pub mod analysis;
pub mod data;
pub mod estimands;
pub mod error;
pub mod linalg;
pub mod mean_outcome;
pub mod nuisance;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tmle;

pub use error::{Error, Result};
