//! Floating-point scalar abstraction: f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type for model parameters, updates, and optimizer state.
///
/// Everything numeric in the simulator is written against this trait so a
/// whole run can be instantiated at f32 or f64. Metrics are always reported
/// as f64 regardless of the parameter scalar.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Bit pattern of the value, widened to u64. Used for exact-trajectory
    /// fingerprints and mutation checks.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Shorthand for the ubiquitous f64 -> T conversion.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 value representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_distinguish_sign_of_zero() {
        assert_ne!((0.0f64).bits(), (-0.0f64).bits());
        assert_ne!((0.0f32).bits(), (-0.0f32).bits());
    }

    #[test]
    fn cast_round_trips_exact_f64() {
        let x: f64 = cast::<f64>(0.1);
        assert_eq!(x, 0.1);
        let y: f32 = cast::<f32>(0.5);
        assert_eq!(y, 0.5f32);
    }
}
