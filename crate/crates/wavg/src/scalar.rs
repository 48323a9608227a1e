//! Scalar abstraction over the two supported element types.
//!
//! All element-wise math in this crate (optimizer updates, averaging
//! reductions, gradient clipping) is written once, generically over
//! [`Scalar`], and instantiated for `f32` and `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Element type tag as stored in checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    /// Wire tag used by the checkpoint format.
    pub const fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Size of one element in bytes.
    pub const fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of a tensor block: `f32` or `f64`.
///
/// Accumulations that the contract pins to double precision go through
/// `to_f64`/`from_f64`; everything else stays in `Self`.
pub trait Scalar: num_traits::Float + Copy + Send + Sync + fmt::Debug + 'static {
    const DTYPE: Dtype;

    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;

    /// Append the little-endian encoding of `self` to `buf`.
    fn write_le(self, buf: &mut Vec<u8>);
    /// Decode from exactly `Dtype::element_size()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_tags_round_trip() {
        for d in [Dtype::F32, Dtype::F64] {
            assert_eq!(Dtype::from_tag(d.tag()), Some(d));
        }
        assert_eq!(Dtype::from_tag(2), None);
    }

    #[test]
    fn le_encoding_round_trips_bit_patterns() {
        let mut buf = Vec::new();
        f32::from_bits(0x7fc0_dead).write_le(&mut buf); // NaN with payload
        assert_eq!(f32::read_le(&buf).to_bits(), 0x7fc0_dead);

        buf.clear();
        f64::from_bits(0xfff8_0000_0000_beef).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf).to_bits(), 0xfff8_0000_0000_beef);
    }
}
