use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the numeric kernels are generic over.
///
/// Inference runs in `f32`; test oracles instantiate the same kernels in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to every Scalar")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn sum_iter<I: IntoIterator<Item = Self>>(it: I) -> Self {
        it.into_iter().fold(Self::zero(), |a, b| a + b)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
