//! Scalar abstraction so the whole stack runs in both f32 and f64.
//!
//! Training normally uses f32; gradient checks and oracle comparisons use
//! f64. The trait adds exact conversions and little-endian serialization on
//! top of `num_traits::Float`.

use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use num_traits::Float;

/// Tag identifying the element type of serialized tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_tag(tag: u8) -> Option<Precision> {
        match tag {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }

    /// Serialized size of one element in bytes; doubles as the format tag.
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub trait Real:
    Float + num_traits::NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw bit pattern, widened to u64 for f32. Used for bit-exactness tests.
    fn bits(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from the front of `bytes`; callers check the length.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
