//! Scalar abstraction shared by every numeric routine in the crate.

use candle_core::{FloatDType, WithDType};
use num_traits::{Float, FloatConst};

/// Floating point scalar usable both for host-side math and as a tensor dtype: `f32` or `f64`.
pub trait Real: FloatDType + Float + FloatConst + Default + std::fmt::Debug + 'static {
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self {
        <Self as WithDType>::from_f64(v)
    }

    /// Lossy conversion to `f64`.
    fn as_f64(self) -> f64 {
        <Self as WithDType>::to_f64(self)
    }
}

impl Real for f32 {}
impl Real for f64 {}
