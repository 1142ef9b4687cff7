//! Floating-point scalar abstraction: f32 for training, f64 for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type the numeric core is generic over.
///
/// Training runs in `f32` by default; gradient verification switches the
/// whole stack to `f64` through this trait.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

/// Lossy cast from f64 into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 -> scalar cast")
}

/// Widen the working scalar to f64 (for logging and reductions).
#[inline]
pub fn dbl<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar -> f64 cast")
}
