//! Bayesian RSS localization with iterative prior refinement.

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod config;
pub mod estimator;
pub mod model;
pub mod sampler;
pub mod scenario;
