use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Real scalar the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. Gradient checks and the on-disk
/// formats assume `f64`; `f32` is available for cheaper inference.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + SampleUniform
    + Send
    + Sync
    + 'static
{
    /// Lossless widening used by the checkpoint archive.
    fn to_f64_lossless(self) -> f64;

    fn from_f64_lossy(v: f64) -> Self;

    /// Shorthand for constants in generic code.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_f64_lossy(n as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
