//! Covariate adjustment for randomized trials with missing covariates and
//! outcomes.

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod missing;
pub mod numerics;
pub mod simlab;

pub use error::{Error, ErrorClass, Result};
