//! Packing of b-bit unsigned codes into 32-bit words.
//!
//! Layout: code `i` occupies bits `[i*b, (i+1)*b)` of the little-endian bit
//! stream formed by the words in order, least-significant bit first. With
//! b = 3 a code may straddle two words. Trailing bits of the last word are
//! zero. This is also the on-disk layout used by checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit widths accepted for packed codes.
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unsupported bit width {bits}; expected one of 2, 3, 4, 8"
        )))
    }
}

/// Number of 32-bit words needed for `count` codes of `bits` each.
pub fn words_needed(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(32)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedCodes {
    bits: u8,
    count: usize,
    words: Vec<u32>,
}

impl PackedCodes {
    /// Packs `codes`; fails if any code does not fit in `bits`.
    pub fn pack(codes: &[u32], bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let limit = 1u64 << bits;
        let mut words = vec![0u32; words_needed(codes.len(), bits)];
        for (i, &c) in codes.iter().enumerate() {
            if c as u64 >= limit {
                return Err(Error::Range(format!(
                    "code {c} at index {i} does not fit in {bits} bits"
                )));
            }
            let bit = i * bits as usize;
            let (w, off) = (bit / 32, bit % 32);
            words[w] |= c << off;
            if off + bits as usize > 32 {
                words[w + 1] |= c >> (32 - off);
            }
        }
        Ok(Self {
            bits,
            count: codes.len(),
            words,
        })
    }

    /// Reassembles from raw parts, validating length and trailing bits.
    pub fn from_words(bits: u8, count: usize, words: Vec<u32>) -> Result<Self> {
        check_bits(bits)?;
        let need = words_needed(count, bits);
        if words.len() != need {
            return Err(Error::Format(format!(
                "{count} codes at {bits} bits need {need} words, found {}",
                words.len()
            )));
        }
        let used = count * bits as usize % 32;
        if used != 0 {
            let last = *words.last().expect("nonzero count");
            if last >> used != 0 {
                return Err(Error::Format(
                    "nonzero padding bits after the last code".into(),
                ));
            }
        }
        Ok(Self { bits, count, words })
    }

    #[inline]
    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// Storage in bytes (whole words).
    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }

    /// Code at position `i`. Caller guarantees `i < count`.
    #[inline]
    pub fn get(&self, i: usize) -> u32 {
        let bits = self.bits as usize;
        let bit = i * bits;
        let (w, off) = (bit / 32, bit % 32);
        let mask = ((1u64 << bits) - 1) as u32;
        let mut v = self.words[w] >> off;
        if off + bits > 32 {
            v |= self.words[w + 1] << (32 - off);
        }
        v & mask
    }

    pub fn unpack(&self) -> Vec<u32> {
        (0..self.count).map(|i| self.get(i)).collect()
    }

    /// Codes `[row*row_len, (row+1)*row_len)`, decoded without touching the rest.
    pub fn unpack_row(&self, row: usize, row_len: usize) -> Result<Vec<u32>> {
        let mut out = vec![0; row_len];
        self.unpack_row_into(row, row_len, &mut out)?;
        Ok(out)
    }

    pub fn unpack_row_into(&self, row: usize, row_len: usize, out: &mut [u32]) -> Result<()> {
        let end = (row + 1)
            .checked_mul(row_len)
            .filter(|&e| e <= self.count)
            .ok_or_else(|| {
                Error::Index(format!(
                    "row {row} of length {row_len} exceeds {} codes",
                    self.count
                ))
            })?;
        let start = end - row_len;
        for (o, i) in out.iter_mut().zip(start..end) {
            *o = self.get(i);
        }
        Ok(())
    }
}
