//! Rank-4 feature maps and the scalar abstraction shared by the 32-bit
//! compute path and the 64-bit shadow path used for gradient checking.

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};

/// Element type of all numeric kernels. Implemented for `f32` (training and
/// inference) and `f64` (shadow mode for finite-difference verification).
pub trait Real:
    Float
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 array in (batch, channels, height, width) order. All
/// dimensions are at least 1; values are finite.
pub type FeatureMap<T> = Array4<T>;

/// Returns the first non-finite value in `a`, if any.
pub fn find_non_finite<T: Real>(a: &FeatureMap<T>) -> Option<T> {
    a.iter().copied().find(|v| !v.is_finite())
}
