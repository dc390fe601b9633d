//! Generalized unrestricted models: predictors built from sums and products of
//! unknown functions with Gaussian-process priors, fitted by Laplace
//! approximation or sparse variational inference.

pub mod dsl;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod laplace;
pub mod obs;
pub mod posterior;
pub mod vi;
pub mod hyper;
pub mod bench;

pub use error::{GumError, Result};
pub mod cli;
