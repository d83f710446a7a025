//! Bit-level primitives over IEEE-754 single-precision words.
//!
//! Bit 0 is the least significant mantissa bit, bits 23..=30 hold the
//! biased exponent and bit 31 is the sign. Every operation works on the raw
//! word, so NaN payloads and signed zeros survive untouched.

use crate::error::{Error, Result};

pub const SIGN_BIT: u32 = 31;
pub const EXPONENT_SHIFT: u32 = 23;
pub const MANTISSA_MASK: u32 = (1 << 23) - 1;
pub const EXPONENT_MASK: u32 = 0xFF;

/// Raw little-endian word of one FP32 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FloatWord(pub u32);

impl FloatWord {
    pub fn from_f32(value: f32) -> Self {
        FloatWord(value.to_bits())
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits(self.0)
    }

    pub fn from_le_bytes(bytes: [u8; 4]) -> Self {
        FloatWord(u32::from_le_bytes(bytes))
    }

    pub fn to_le_bytes(self) -> [u8; 4] {
        self.0.to_le_bytes()
    }

    pub fn sign(self) -> u8 {
        (self.0 >> SIGN_BIT) as u8
    }
}

/// Sign, biased exponent and mantissa fields of a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fields {
    pub sign: u8,
    pub exponent: u8,
    pub mantissa: u32,
}

pub fn decompose(w: FloatWord) -> Fields {
    Fields {
        sign: (w.0 >> SIGN_BIT) as u8,
        exponent: ((w.0 >> EXPONENT_SHIFT) & EXPONENT_MASK) as u8,
        mantissa: w.0 & MANTISSA_MASK,
    }
}

/// Inverse of [`decompose`]. Out-of-range fields are masked.
pub fn reassemble(f: Fields) -> FloatWord {
    FloatWord(
        (u32::from(f.sign & 1) << SIGN_BIT)
            | (u32::from(f.exponent) << EXPONENT_SHIFT)
            | (f.mantissa & MANTISSA_MASK),
    )
}

pub fn flip_bit(w: FloatWord, pos: u32) -> Result<FloatWord> {
    if pos > 31 {
        return Err(Error::BitPosition(pos));
    }
    Ok(FloatWord(w.0 ^ (1 << pos)))
}

/// Negates `value` by toggling bit 31 of its encoding.
pub fn flip_sign(value: f32) -> f32 {
    f32::from_bits(value.to_bits() ^ (1 << SIGN_BIT))
}
