//! Scalar abstraction: the whole substrate runs in `f32` or `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the math substrate is generic over.
///
/// `f32` is the default for training throughput; `f64` is used wherever
/// finite-difference oracles need headroom.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; all literals enter generic code this way.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    /// Lossless widening to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `Scalar::from_f64_lossy`, used heavily in generic math.
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
