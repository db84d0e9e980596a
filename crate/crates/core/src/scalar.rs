//! Scalar abstraction for the numeric core.
//!
//! All math in this crate is written against [`Real`] so the kernels work for
//! both `f32` and `f64`. The crate root exports `f64` aliases (`Tensor`,
//! `Network`, ...) which the pipeline, file formats and service layer use;
//! the wire protocol narrows to `f32` at the boundary.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar usable by the numeric kernels.
pub trait Real:
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
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into the scalar type.
///
/// Panics only if the value is not representable, which cannot happen for the
/// finite constants this crate feeds it.
#[inline]
pub fn real<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("constant representable in scalar type")
}

/// Widens a scalar to `f64` (exact for `f32` and `f64`).
#[inline]
pub fn to_f64<S: Real>(x: S) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}
