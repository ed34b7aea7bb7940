//! Floating-point scalar abstraction: f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Scalar type the whole library is generic over.
///
/// Tight-tolerance checks (scale invariance, reduction identities) are only
/// meaningful at f64; f32 is supported for forward evaluation.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cast an f64 constant into the working scalar type.
#[inline]
pub fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant must be representable")
}
