//! Scalar abstraction for the numeric kernels (similarity, statistics, rewards).
//!
//! Everything that does real-valued arithmetic is generic over [`Scalar`] so the
//! same code runs on `f32` and `f64`. The pipeline itself uses `f64` through the
//! aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as scalar")
    }

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable as scalar")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}

/// Arithmetic mean; `None` for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::from_count(xs.len()))
}

/// Population standard deviation; `None` for an empty slice.
pub fn std_dev<T: Scalar>(xs: &[T]) -> Option<T> {
    let m = mean(xs)?;
    let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_count(xs.len());
    Some(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std() {
        assert_eq!(mean::<f64>(&[]), None);
        assert_eq!(mean(&[0.2f64, 0.4]).map(|m| (m * 10.0).round()), Some(3.0));
        assert_eq!(std_dev(&[3.0f32, 3.0, 3.0]), Some(0.0));
        let s = std_dev(&[1.0f64, 3.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
