//! Scalar abstraction: everything numeric is generic over `f32` (runtime)
//! or `f64` (verification mode).

use std::fmt::{Debug, Display};

/// Floating-point element type of all tensors and network math.
///
/// `f32` is the runtime precision; `f64` is selected for verification
/// (gradient checks, oracle comparisons, bit-reproducible training).
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossy cast from `f64` into the working precision.
#[inline]
pub fn cast<S: Scalar>(x: f64) -> S {
    S::from(x).expect("f64 -> Scalar cast")
}

/// Cast back to `f64` for reporting and I/O.
#[inline]
pub fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("Scalar -> f64 cast")
}
