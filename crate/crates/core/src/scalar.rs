//! Floating-point scalar abstraction shared by the tensor, model and trainer code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the numerical core is generic over.
///
/// Implemented for `f32` and `f64`. Everything user-facing (CLI, acceptance
/// runs, gradient checks) uses `f64`; `f32` is supported for cheaper training.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or data value.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }

    fn type_name() -> &'static str;
}

impl Scalar for f64 {
    fn type_name() -> &'static str {
        "f64"
    }
}

impl Scalar for f32 {
    fn type_name() -> &'static str {
        "f32"
    }
}
