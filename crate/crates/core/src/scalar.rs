//! Floating-point abstraction shared by the scalar-generic parts of the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used by the compression, update and bound routines: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or parameter.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn norm_sq<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum()
}

#[inline]
pub(crate) fn dist_sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum()
}
