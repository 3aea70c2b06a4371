//! Scalar abstractions shared by every module.
//!
//! Two families of numbers show up in this crate:
//!
//! * [`Coefficient`]: anything the weight algebra can run on. Floats use a
//!   `1e-12` tie tolerance; exact rationals use zero, which is what lets the
//!   suffix-sum identities be checked without rounding.
//! * [`Real`]: floating point element types that can also live inside a
//!   checkpoint archive (`f32`, `f64`).

use std::fmt::{Debug, Display};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

use crate::tensorstore::{DType, Stored};

/// Numbers on which decay coefficients and merge weights are computed.
pub trait Coefficient: Num + Clone + PartialOrd + Debug + Send + Sync + 'static {
    /// Violations smaller than this are treated as ties.
    fn tolerance() -> Self;

    fn approx_f64(&self) -> f64;

    fn from_f64_lossy(v: f64) -> Self;
}

impl Coefficient for f64 {
    fn tolerance() -> Self {
        1e-12
    }

    fn approx_f64(&self) -> f64 {
        *self
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

impl Coefficient for f32 {
    // f32 cannot resolve 1e-12 around 1.0.
    fn tolerance() -> Self {
        1e-6
    }

    fn approx_f64(&self) -> f64 {
        f64::from(*self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Coefficient for BigRational {
    fn tolerance() -> Self {
        BigRational::from_integer(BigInt::from(0))
    }

    fn approx_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn from_f64_lossy(v: f64) -> Self {
        BigRational::from_float(v).unwrap_or_else(|| BigRational::from_integer(BigInt::from(0)))
    }
}

/// Fixed-width little-endian element that a checkpoint archive can store.
pub trait Element: Copy + Default + Send + Sync + Debug + 'static {
    const DTYPE: DType;

    fn put_le(self, out: &mut Vec<u8>);

    /// `bytes.len()` must equal `DTYPE.size()`.
    fn get_le(bytes: &[u8]) -> Self;

    fn as_f64(self) -> f64;

    fn from_f64_cast(v: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }

    fn from_f64_cast(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn from_f64_cast(v: f64) -> Self {
        v
    }
}

/// Floating point scalar used for training state and spectral routines.
pub trait Real:
    Float + FromPrimitive + Coefficient + Stored + Display + Default + std::iter::Sum
{
    /// Shorthand for constants that are always representable.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {}
impl Real for f64 {}
