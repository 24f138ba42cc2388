//! Scalar abstraction for the numeric core.
//!
//! Tensor, tape, ops and the gradient checker are generic over [`Scalar`] so
//! the same kernels run in `f32` or `f64`. The pipeline layers (geometry,
//! models, training, evaluation) pin `f64`.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type usable by the tensor core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Lossy conversion from `f64`, for literals inside generic code.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
