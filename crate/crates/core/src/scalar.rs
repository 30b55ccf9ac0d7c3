//! Scalar abstraction: the numerical kernels are generic over the
//! floating-point type; `f64` is the default for experiments.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the solvers are generic over (`f32` or `f64`).
pub trait Scalar:
    RealField + FromPrimitive + ToPrimitive + Copy + Default + std::fmt::Display + std::fmt::LowerExp
{
}

impl<T> Scalar for T where
    T: RealField
        + FromPrimitive
        + ToPrimitive
        + Copy
        + Default
        + std::fmt::Display
        + std::fmt::LowerExp
{
}

/// Shorthand for embedding an `f64` literal into the working scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Tiny positive floor used to guard divisions and pivot checks.
#[inline]
pub fn tiny<T: Scalar>() -> T {
    let e = T::default_epsilon();
    e * e * e
}
