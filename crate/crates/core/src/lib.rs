//! Robust variational rho-posteriors.
//!
//! The crate replaces the log-likelihood in Bayesian updating by the bounded
//! contrast `psi(p_theta' / p_theta)` and computes Gaussian variational
//! approximations of the resulting posterior by solving a min-max problem.

pub mod bounds;
pub mod contrast;
pub mod error;
pub mod experiments;
pub mod hellinger;
pub mod models;
pub mod rng;
pub mod saddle;
pub mod selfcheck;
pub mod special;
pub mod variational;

pub use error::{Error, Result};
