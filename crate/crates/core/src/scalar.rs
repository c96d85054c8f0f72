//! Working precision abstraction.
//!
//! Training runs in `f32`; every oracle comparison runs in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point type usable as a matrix entry.
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Short name used in reports and the weight container ("f32" / "f64").
    const NAME: &'static str;
    /// Size of one entry in bytes.
    const BYTES: usize;

    /// Converts a literal. Rounds to nearest for `f32`.
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Default bound on `max |YᵀY - I|` for Stiefel points.
    fn orth_tol() -> Self;

    /// Relative bound on `max |YᵀΔ + ΔᵀY|` accepted as "tangent".
    fn tangent_tol() -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn orth_tol() -> Self {
        1e-5
    }
    fn tangent_tol() -> Self {
        1e-4
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn orth_tol() -> Self {
        1e-11
    }
    fn tangent_tol() -> Self {
        1e-9
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}
