//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the model, market and solvers are written against.
///
/// Implemented for `f32` and `f64`. Tolerances that default from the scalar
/// type (see [`Scalar::default_tolerance`]) are widened for `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    /// `f64` view, used for error payloads and export.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `max(preferred, 1000 ulp)`: keeps `f64` tolerances where they are and
    /// lifts them to something attainable for `f32`.
    #[inline]
    fn default_tolerance(preferred: f64) -> Self {
        Self::lit(preferred).max(Self::epsilon() * Self::lit(1000.0))
    }

    /// Positive part `max(x, 0)`.
    #[inline]
    fn pos(self) -> Self {
        self.max(Self::zero())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
