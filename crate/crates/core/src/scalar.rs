//! Scalar abstraction shared by every numerical module.
//!
//! All model math is written against [`Real`], which both `f32` and `f64`
//! satisfy. Data files are read and written through `f64`, so any `Real`
//! must round-trip through it.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the model code.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static {
    /// Converts an `f64` constant into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion to f64")
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }

    fn neg_infinity() -> Self;
}

impl Real for f32 {
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
}

impl Real for f64 {
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
}

/// `ln(2π)`.
pub fn ln_two_pi<T: Real>() -> T {
    T::lit(1.837_877_066_409_345_3)
}

/// Numerically stable `ln Σ exp(v)`; `-inf` for an empty slice or all `-inf`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite_value() {
        return max;
    }
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [-1.0f64, -2.0, -3.0];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_survives_underflow() {
        let v = [-1000.0f64, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn works_in_single_precision() {
        let v = [0.0f32, 0.0];
        assert!((log_sum_exp(&v) - 2f32.ln()).abs() < 1e-6);
    }
}
