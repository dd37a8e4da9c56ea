//! Floating point scalar abstraction shared by the dense math.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::tensor::Dtype;

/// Floating point element type of a tensor or matrix: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// Storage dtype tag written into checkpoint headers.
    const DTYPE: Dtype;

    /// Lossless widening (or identity) to `f64`.
    fn to_f64_lossless(self) -> f64;

    /// Round-to-nearest narrowing from `f64`.
    fn from_f64_rounded(value: f64) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_f64_rounded(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    #[inline]
    fn from_f64_rounded(value: f64) -> Self {
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_tags() {
        assert_eq!(<f32 as Scalar>::DTYPE, Dtype::F32);
        assert_eq!(<f64 as Scalar>::DTYPE, Dtype::F64);
    }

    #[test]
    fn f32_round_trip_through_f64() {
        let x = 0.1f32;
        assert_eq!(f32::from_f64_rounded(x.to_f64_lossless()).to_bits(), x.to_bits());
    }
}
