//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating-point scalar the grid and network math is generic over.
///
/// `f32` is the production type (fields serialize as 32-bit floats); `f64`
/// is used where finite-difference gradient checks need the extra precision.
pub trait Scalar:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for casting config-space `f64` values into the working scalar.
#[inline]
pub fn cast<S: Scalar>(v: f64) -> S {
    S::from(v).expect("f64 value representable in scalar type")
}
