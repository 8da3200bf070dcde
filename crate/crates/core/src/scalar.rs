//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

/// Floating point element type for tensors, activations and gradients.
///
/// Implemented for `f32` (training) and `f64` (gradient checks and reference
/// computations).
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("Scalar always converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
