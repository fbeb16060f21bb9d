//! Maximum-likelihood variance-components estimation for the linear
//! random-effects model `y = Xβ + ε`, exact moment algebra for quadratic
//! forms in independent sub-Gaussian vectors, and a seeded Monte Carlo
//! harness that checks the finite-sample concentration and
//! normal-approximation behaviour of the estimator.

pub mod error;
pub mod matio;
pub mod mcverify;
pub mod qform;
pub mod randsrc;
pub mod remodel;
pub mod spectral;
pub mod vcest;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
