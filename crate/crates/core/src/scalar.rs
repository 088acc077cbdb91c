//! Scalar abstraction for the numeric core.
//!
//! The network, losses and gate are generic over [`Scalar`] so the same
//! code path runs in `f32` for the pipeline and in `f64` for the
//! finite-difference oracle. Only `f32` and `f64` implement it.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless widening for oracle math and stable accumulation.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cast a literal into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}
