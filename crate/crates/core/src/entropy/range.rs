//! Byte-oriented range coder (carry-propagating low, 32-bit range) over
//! 16-bit frequency tables.
//!
//! Stream layout: `u32` little-endian symbol count, then coder bytes. An empty
//! sequence is the 4-byte header alone.

use super::table::{SymbolModel, PRECISION};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }
}

impl RangeEncoder {
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0);
        let r = self.range >> PRECISION;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = ((self.low as u32) << 8) as u64;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Truncated(format!("range coder needs byte {} of {}", self.pos + 1, self.bytes.len())))?;
        self.pos += 1;
        Ok(b)
    }

    /// Decodes one symbol, given a lookup from a target frequency to
    /// `(symbol, start, freq)`.
    pub fn decode_with(&mut self, lookup: impl FnOnce(u32) -> (i32, u32, u32)) -> Result<i32> {
        let r = self.range >> PRECISION;
        let target = (self.code / r).min((1 << PRECISION) - 1);
        let (symbol, start, freq) = lookup(target);
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }
}

/// Encodes `symbols`, the `i`-th under `model.table(i)`.
pub fn range_encode(symbols: &[i32], model: &dyn SymbolModel) -> Vec<u8> {
    let mut out = (symbols.len() as u32).to_le_bytes().to_vec();
    if symbols.is_empty() {
        return out;
    }
    let mut enc = RangeEncoder::default();
    for (i, &s) in symbols.iter().enumerate() {
        let (start, freq) = model.table(i).range(s);
        enc.encode(start, freq);
    }
    out.extend(enc.finish());
    out
}

/// Decodes a stream produced by [`range_encode`]; `expected` is the symbol
/// count the caller derives from the latent shape.
pub fn range_decode(bytes: &[u8], model: &dyn SymbolModel, expected: usize) -> Result<Vec<i32>> {
    let header: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| Error::Truncated("stream shorter than its 4-byte header".into()))?
        .try_into()
        .expect("slice of 4");
    let count = u32::from_le_bytes(header) as usize;
    if count != expected {
        return Err(Error::InvalidArgument(format!("stream holds {count} symbols, expected {expected}")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(&bytes[4..])?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = model.table(i);
        out.push(dec.decode_with(|t| table.lookup(t))?);
    }
    Ok(out)
}
