//! Floating-point scalar abstraction shared by the loss calculators and metrics.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// floating point: f32 or f64
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + serde::Serialize + 'static {
    /// Logistic function, evaluated without overflow for large |x|.
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// Lossless-enough conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }

    /// Conversion from f64 literals used for defaults.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
