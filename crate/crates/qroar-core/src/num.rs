//! Scalar abstraction for the numeric core.
//!
//! The math modules (`rope`, `interp`, `quant`, `diagnostics`) are generic
//! over [`Real`] so they work in `f32` or `f64`. The pipeline modules pin
//! `f64` through the aliases exported at the crate root; the documented
//! tolerances assume double precision.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar usable throughout the math modules.
pub trait Real: Float + FloatConst + FromPrimitive + Debug + Display + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FloatConst + FromPrimitive + Debug + Display + Send + Sync + 'static {}

/// Convert an `f64` constant into the working scalar type.
///
/// Panics only if the target type cannot represent any `f64`, which does not
/// happen for the supported scalars.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant must convert to the working scalar")
}

/// Convert a `usize` (dimension, count) into the working scalar type.
#[inline]
pub fn real_usize<T: Real>(v: usize) -> T {
    T::from_usize(v).expect("usize must convert to the working scalar")
}
