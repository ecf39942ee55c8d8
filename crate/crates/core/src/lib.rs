//! Level-set Cox processes: simulation, exact-approximate Bayesian fitting
//! and prediction.

pub mod covariance;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod io;
pub mod nngp;
pub mod priors;
pub mod rng;
pub mod sampler;
pub mod spatiotemporal;
pub mod predict;
pub mod diagnostics;

pub use error::{Error, Result};
