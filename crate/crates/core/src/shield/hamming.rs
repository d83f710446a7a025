//! Extended Hamming (64,57) SEC-DED over sign bits.
//!
//! Codeword positions 1..=63 hold six parity bits at the powers of two and
//! 57 data bits everywhere else (ascending); position 0 holds the overall
//! parity of positions 1..=63. Only the seven check bits are stored; the
//! data bits are the live sign bits in the archive.

pub const DATA_BITS: usize = 57;
pub const CHECK_BITS: usize = 7;

const fn data_positions() -> [u8; DATA_BITS] {
    let mut out = [0u8; DATA_BITS];
    let mut pos = 1u32;
    let mut i = 0;
    while pos < 64 {
        if !pos.is_power_of_two() {
            out[i] = pos as u8;
            i += 1;
        }
        pos += 1;
    }
    out
}

pub const DATA_POSITIONS: [u8; DATA_BITS] = data_positions();

/// Check bits `[p1, p2, p4, p8, p16, p32, overall]` for up to 57 data bits
/// (missing trailing data bits count as zero).
pub fn encode(data: &[bool]) -> [bool; CHECK_BITS] {
    assert!(data.len() <= DATA_BITS);
    let mut syndrome = 0u8;
    let mut ones = 0u32;
    for (i, &d) in data.iter().enumerate() {
        if d {
            syndrome ^= DATA_POSITIONS[i];
            ones += 1;
        }
    }
    let mut check = [false; CHECK_BITS];
    for (j, c) in check.iter_mut().take(6).enumerate() {
        *c = syndrome >> j & 1 == 1;
        ones += u32::from(*c);
    }
    check[6] = ones % 2 == 1;
    check
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Clean,
    /// Single error in data bit `i`.
    DataError(usize),
    /// Single error in one of the stored check bits; data is intact.
    CheckError,
    /// Two (or an even number of) errors; not correctable.
    Uncorrectable,
}

pub fn decode(data: &[bool], check: &[bool; CHECK_BITS]) -> Decoded {
    assert!(data.len() <= DATA_BITS);
    let mut syndrome = 0u8;
    let mut ones = 0u32;
    for (i, &d) in data.iter().enumerate() {
        if d {
            syndrome ^= DATA_POSITIONS[i];
            ones += 1;
        }
    }
    for (j, &c) in check.iter().take(6).enumerate() {
        if c {
            syndrome ^= 1 << j;
            ones += 1;
        }
    }
    let parity_odd = (ones + u32::from(check[6])) % 2 == 1;
    match (syndrome, parity_odd) {
        (0, false) => Decoded::Clean,
        (_, false) => Decoded::Uncorrectable,
        (0, true) => Decoded::CheckError,
        (s, true) if s.is_power_of_two() => Decoded::CheckError,
        (s, true) => match DATA_POSITIONS.iter().position(|&p| p == s) {
            Some(i) if i < data.len() => Decoded::DataError(i),
            _ => Decoded::Uncorrectable,
        },
    }
}
