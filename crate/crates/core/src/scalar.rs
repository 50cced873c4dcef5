//! Scalar abstraction over the floating-point types supported by the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar used by every numeric routine in this crate.
///
/// Implemented for `f32` and `f64`. Training code defaults to `f64`
/// (see the aliases at the crate root); `f32` is available for callers
/// that trade precision for memory.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for constants and configuration values.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    /// Lossy widening back to `f64`, for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    fn from_usize_(v: usize) -> Self {
        Self::from_usize(v).expect("usize not representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
