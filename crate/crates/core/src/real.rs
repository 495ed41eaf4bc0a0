use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar element type of the tape. `f64` is the default; `f32` exists for
/// byte-accounting runs that mirror single-precision training.
pub trait Real:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;
    const NAME: &'static str;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}
