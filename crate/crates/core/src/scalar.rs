//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point element type accepted by the model: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or stored value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numeric type used for evaluation metrics; floats and exact rationals both qualify.
pub trait MetricScalar:
    Clone + PartialOrd + Debug + num_traits::Num + FromPrimitive
{
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable")
    }
}

impl<T> MetricScalar for T where T: Clone + PartialOrd + Debug + num_traits::Num + FromPrimitive {}
