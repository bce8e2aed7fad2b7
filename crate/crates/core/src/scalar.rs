//! Scalar abstraction so the numeric core works over f32 or f64.
//!
//! Everything downstream is written against [`Scalar`]; the crate root
//! exports f64-backed aliases, which is what the reference configurations
//! and the test suite use.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type for tensors, parameters, and losses.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Type tag written into serialized manifests.
    const DTYPE: &'static str;

    /// Converts a literal or config value. Panics only if the value does not
    /// fit, which cannot happen for the finite f64 constants used here.
    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    /// Widens to f64 for metrics, reports, and serialization.
    fn to64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// One draw from the standard normal distribution.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from U[0, 1).
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Additive mask value treated as negative infinity by the softmax. Using a
/// large finite sentinel keeps every intermediate finite while still driving
/// masked probabilities to exactly zero after the max-subtracted exponential.
pub const NEG_SENTINEL: f64 = -1.0e30;

/// Threshold below which a score is considered masked.
pub const MASKED_BELOW: f64 = -1.0e29;
