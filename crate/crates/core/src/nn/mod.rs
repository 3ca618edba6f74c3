//! Minimal layer library with hand-written backward passes.
//!
//! Layers are generic over [`Real`] so the same network runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Forward
//! passes borrow the layer immutably; backward passes accumulate into the
//! parameter gradients and need the forward inputs handed back by the caller.

mod activation;
mod conv;
mod linear;
mod param;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use activation::{sigmoid, silu, silu_backward};
pub use conv::{col2im, im2col, Conv2d, ConvGeometry, ConvTranspose2d};
pub use linear::Linear;
pub use param::{Param, ParamSlot, ParamVisitor};

/// Floating-point element type of the network.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Returns the first non-finite position, if any.
pub fn first_non_finite<F: Real>(values: impl IntoIterator<Item = F>) -> Option<usize> {
    values.into_iter().position(|v| !v.is_finite())
}
