//! Floating point scalar used by the entropy and selection math.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};

/// floating point: f32 or f64
pub trait Scalar: Float + FromPrimitive + NumCast + Debug + Display + Default + Send + Sync + 'static {
    /// Converts a count into the scalar type.
    fn from_count(count: u64) -> Self {
        <Self as NumCast>::from(count).expect("count representable as float")
    }

    /// Lossy conversion for serialization.
    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
