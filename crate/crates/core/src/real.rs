//! Scalar abstraction over the two supported precisions.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point type usable by every kernel in this crate.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Name stored in checkpoint manifests.
    const DTYPE: &'static str;
    const PRECISION: Precision;

    /// Additive score for masked attention entries.
    fn mask_value() -> Self {
        Self::c(-1e9)
    }

    /// Lossy conversion from an `f64` constant.
    fn c(x: f64) -> Self;

    fn to_f64(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const PRECISION: Precision = Precision::Working;

    fn c(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const PRECISION: Precision = Precision::High;

    fn c(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Working precision is `f32` (benchmarks, training); high precision is
/// `f64` (verification).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Working,
    High,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Working => "working",
            Precision::High => "high",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "working" | "f32" => Ok(Precision::Working),
            "high" | "f64" => Ok(Precision::High),
            other => Err(format!("unknown precision `{other}` (expected working|high)")),
        }
    }
}
