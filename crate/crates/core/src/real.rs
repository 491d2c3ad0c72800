use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Floating point element type of tensors. Training runs in `f32`; gradient
/// checks and oracle tests use `f64`.
pub trait Real: Float + Debug + Default + Sum + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

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
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
