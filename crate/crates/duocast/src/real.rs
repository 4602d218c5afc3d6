use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar abstraction so the same operator code runs in f32 (training) and
/// f64 (gradient checking, spectral identities).
pub trait Real:
    rustfft::FftNum
    + num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (identity for f64).
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("real converts to f64")
    }

    fn of_usize(v: usize) -> Self {
        Self::of(v as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}
