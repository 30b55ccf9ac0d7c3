//! Numerical laboratory for an inverse boundary value problem for the
//! Schrödinger operator `-Δ + q` with piecewise-affine potentials.

pub mod dtn;
pub mod geometry;
pub mod pde;
pub mod potential;
pub mod recover;
pub mod runge;
pub mod scalar;
pub mod util;

pub use scalar::Scalar;
