//! Value quantization for stored label maps.
//!
//! Values are kept as raw bit patterns (`u32`) so that a store round-trip is a
//! bitwise identity regardless of the format.

use std::fmt;
use std::str::FromStr;

use half::f16;

use crate::Error;

/// Storage format of the per-pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantFormat {
    /// IEEE-754 binary32.
    F32,
    /// IEEE-754 binary16.
    F16,
    /// 1-4-3 minifloat, exponent bias 7, no infinities, saturating at 448.
    F8,
}

impl QuantFormat {
    pub const ALL: [QuantFormat; 3] = [QuantFormat::F32, QuantFormat::F16, QuantFormat::F8];

    pub fn code(self) -> u8 {
        match self {
            QuantFormat::F32 => 0,
            QuantFormat::F16 => 1,
            QuantFormat::F8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QuantFormat::F32),
            1 => Some(QuantFormat::F16),
            2 => Some(QuantFormat::F8),
            _ => None,
        }
    }

    /// Bytes per stored value.
    pub fn bytes(self) -> usize {
        match self {
            QuantFormat::F32 => 4,
            QuantFormat::F16 => 2,
            QuantFormat::F8 => 1,
        }
    }

    /// Worst-case relative rounding error for values in the normal range.
    pub fn relative_bound(self) -> f64 {
        match self {
            QuantFormat::F32 => 0.0,
            QuantFormat::F16 => 2f64.powi(-11),
            QuantFormat::F8 => 2f64.powi(-4),
        }
    }

    /// Largest finite magnitude.
    pub fn max_value(self) -> f64 {
        match self {
            QuantFormat::F32 => f32::MAX as f64,
            QuantFormat::F16 => 65504.0,
            QuantFormat::F8 => F8_MAX,
        }
    }

    pub fn encode(self, x: f32) -> u32 {
        match self {
            QuantFormat::F32 => x.to_bits(),
            QuantFormat::F16 => f16::from_f32(x).to_bits() as u32,
            QuantFormat::F8 => f8_encode(x) as u32,
        }
    }

    pub fn decode(self, bits: u32) -> f32 {
        match self {
            QuantFormat::F32 => f32::from_bits(bits),
            QuantFormat::F16 => f16::from_bits(bits as u16).to_f32(),
            QuantFormat::F8 => f8_decode(bits as u8),
        }
    }

    /// Quantize then dequantize.
    pub fn round_trip(self, x: f32) -> f32 {
        self.decode(self.encode(x))
    }

    pub(crate) fn write_le(self, bits: u32, out: &mut Vec<u8>) {
        match self {
            QuantFormat::F32 => out.extend_from_slice(&bits.to_le_bytes()),
            QuantFormat::F16 => out.extend_from_slice(&(bits as u16).to_le_bytes()),
            QuantFormat::F8 => out.push(bits as u8),
        }
    }

    /// Reads one value; `bytes` must be exactly [`Self::bytes`] long.
    pub(crate) fn read_le(self, bytes: &[u8]) -> u32 {
        match self {
            QuantFormat::F32 => u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            QuantFormat::F16 => u16::from_le_bytes([bytes[0], bytes[1]]) as u32,
            QuantFormat::F8 => bytes[0] as u32,
        }
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantFormat::F32 => "f32",
            QuantFormat::F16 => "f16",
            QuantFormat::F8 => "f8",
        })
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(QuantFormat::F32),
            "f16" => Ok(QuantFormat::F16),
            "f8" => Ok(QuantFormat::F8),
            other => Err(Error::InvalidParameter(format!(
                "unknown quantization `{other}` (expected f32, f16 or f8)"
            ))),
        }
    }
}

const F8_MAX: f64 = 448.0;
const F8_MIN_NORMAL: f64 = 0.015625; // 2^-6
const F8_SUBNORMAL_STEP: f64 = 0.001953125; // 2^-9
const F8_NAN: u8 = 0x7F;

/// Round-to-nearest-even encode; out-of-range magnitudes saturate to ±448.
fn f8_encode(x: f32) -> u8 {
    if x.is_nan() {
        return F8_NAN;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0x00 };
    let a = (x as f64).abs();
    if a >= F8_MAX {
        return sign | 0x7E;
    }
    if a < F8_MIN_NORMAL {
        // Subnormals are evenly spaced, and the code of the next normal (0x08)
        // follows on directly, so the rounded multiple is the code itself.
        let m = (a / F8_SUBNORMAL_STEP).round_ties_even() as u8;
        return sign | m;
    }
    let mut exp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let frac = a / 2f64.powi(exp);
    let mut mant = ((frac - 1.0) * 8.0).round_ties_even() as u8;
    if mant == 8 {
        mant = 0;
        exp += 1;
    }
    let code = (((exp + 7) as u8) << 3) | mant;
    sign | code.min(0x7E)
}

fn f8_decode(b: u8) -> f32 {
    let sign = if b & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((b >> 3) & 0x0F) as i32;
    let mant = (b & 0x07) as f64;
    if exp == 0x0F && mant == 7.0 {
        return f32::NAN;
    }
    let mag = if exp == 0 {
        mant * F8_SUBNORMAL_STEP
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - 7)
    };
    (sign * mag) as f32
}
