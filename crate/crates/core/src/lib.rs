//! Conditioned stochastic development on model manifolds.

pub mod conditioning;
pub mod curvature_transport;
pub mod development;
pub mod error;
pub mod estimators;
pub mod flat;
pub mod geometry;
pub mod heat_kernel;
pub mod hitting_time;
pub mod output;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod suites;
pub mod test_functions;

pub use error::{Error, Result};
