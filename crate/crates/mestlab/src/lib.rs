//! Regression M-estimation in the moderate-dimensional regime (p/n bounded
//! away from 0 and 1): smooth strongly convex losses, a Newton solver,
//! exact sensitivity derivatives, leave-one-predictor-out approximations,
//! design generators with assumption diagnostics, and Monte Carlo
//! experiment harnesses for coverage and distributional comparisons.

pub mod design;
pub mod error;
pub mod errors;
pub mod harness;
pub mod io;
pub mod loo;
pub mod loss;
pub mod rng;
pub mod sensitivity;
pub mod solver;
pub mod stats;

pub use error::MestError;
