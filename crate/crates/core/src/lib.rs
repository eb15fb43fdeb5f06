//! Numerical laboratory for SDEs with singular drift and nonconstant diffusion.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`]: space-time grids, sampled fields, finite differences and mixed norms;
//! * [`pde`]: the backward Kolmogorov solver and its regularity measurements;
//! * [`transform`]: the iterated drift transformation and its certificates;
//! * [`sde`]: Euler-Maruyama simulation and the Monte-Carlo estimators;
//! * [`scenario`], [`report`], [`runner`]: configuration-driven experiments.

pub mod error;
pub mod grid;
pub mod pde;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod sde;
pub mod transform;

pub use error::{LabError, Result};
