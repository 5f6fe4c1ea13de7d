//! Structured-light face-scanner simulator with a differentiable
//! reconstruction path and optical adversarial attacks against small
//! point-cloud and depth-image recognizers.

pub mod attack;
pub mod error;
pub mod eval;
pub mod fringe;
pub mod geometry;
pub mod io;
pub mod photometric;
pub mod raster;
pub mod recognize;
pub mod reconstruct;
pub mod scan;

pub use error::{Error, Result};
