//! Recursive nearest-neighbor co-kriging (RNNC) for multi-fidelity spatial data.

pub mod conjugate;
pub mod covariance;
pub mod error;
pub mod eval;
pub mod geometry;
mod linalg;
pub mod nngp;
pub mod oracle;
pub mod priors;
pub mod rnnc;
pub mod sampler;

pub use error::{Error, Result};
