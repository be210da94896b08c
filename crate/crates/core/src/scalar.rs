//! Numeric traits the simulator is generic over.
//!
//! [`Scalar`] covers the floating-point types used for training and
//! similarity bookkeeping. [`Exact`] is the weaker field-like bound used by
//! the coverage-time formulas, which also admit arbitrary-precision rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating-point scalar for models, losses and similarity matrices.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand for `from_f64` on constants that are always representable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Field-like number that can be built from a ratio of big integers.
///
/// Implemented for `f32`, `f64` (rounded) and [`BigRational`] (exact).
pub trait Exact: Clone + Num + PartialOrd + Debug {
    fn from_ratio(numer: &BigUint, denom: &BigUint) -> Self;

    fn to_f64_lossy(&self) -> f64;
}

fn ratio_f64(numer: &BigUint, denom: &BigUint) -> f64 {
    BigRational::new(BigInt::from(numer.clone()), BigInt::from(denom.clone()))
        .to_f64()
        .unwrap_or(f64::NAN)
}

impl Exact for f64 {
    fn from_ratio(numer: &BigUint, denom: &BigUint) -> Self {
        ratio_f64(numer, denom)
    }

    fn to_f64_lossy(&self) -> f64 {
        *self
    }
}

impl Exact for f32 {
    fn from_ratio(numer: &BigUint, denom: &BigUint) -> Self {
        ratio_f64(numer, denom) as f32
    }

    fn to_f64_lossy(&self) -> f64 {
        f64::from(*self)
    }
}

impl Exact for BigRational {
    fn from_ratio(numer: &BigUint, denom: &BigUint) -> Self {
        BigRational::new(BigInt::from(numer.clone()), BigInt::from(denom.clone()))
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}
