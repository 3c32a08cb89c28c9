//! Scalar abstraction: the engine runs at f32 for training and f64 for
//! shadow-mode oracles (finite differences, density estimates).

use num_traits::Float;

/// Scalar type the tensor engine is generic over.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting literals into the generic scalar.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x)
}
