//! Scalar abstraction for all floating-point math in this crate.
//!
//! Policy logits, value predictions, tree statistics and preference losses
//! are generic over [`Scalar`], with `f32` and `f64` implementations.
//! Environment arithmetic (quantity definitions, answers) stays exact in
//! `i64` and never goes through this trait.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar used by the policy, value model, search and training.
pub trait Scalar:
    'static
    + Send
    + Sync
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Serialize
    + DeserializeOwned
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Widening conversion used when handing values to RNG / report code.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable log-sum-exp over a slice of logits.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

/// Logistic function sigma(x) = 1 / (1 + e^-x).
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// -log sigma(x), computed as softplus(-x) to stay finite for large |x|.
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    // softplus(-x) = ln(1 + e^-x); branch on sign to avoid overflow.
    if x > T::zero() {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}
