//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display, LowerExp};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the simulation and learning code is generic over: f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(angle: T) -> T {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut a = angle % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}
