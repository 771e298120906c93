//! Scalar abstraction for the numeric core.
//!
//! Everything numeric is generic over `Scalar` so the same code runs in
//! f32 (training precision) and f64 (gradient verification precision).

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

pub trait Scalar: Float + NumAssignOps + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
