//! Byte-oriented range coder over 16-bit cumulative tables.
//!
//! The encoder keeps a 64-bit `low` accumulator (33 significant bits, the top
//! one being the pending carry) and a 32-bit `range`, renormalizing a byte at
//! a time whenever `range < 2²⁴`. Carries are resolved with a cached byte and
//! a run of pending `0xFF` bytes. A flush emits five bytes, so an empty
//! stream encodes to exactly five bytes.

use crate::entropy::cdf::{CdfTable, CdfTables, PRECISION};
use crate::error::{CodecError, Result};

const TOP: u32 = 1 << 24;

/// Bytes written by [`RangeEncoder::finish`] beyond the renormalization
/// output.
pub const FLUSH_BYTES: usize = 5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + freq)` out of `2¹⁶`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << PRECISION);
        let r = self.range >> PRECISION;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, table: &CdfTable, index: usize) {
        self.encode(table.start(index), table.frequency(index));
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
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..FLUSH_BYTES {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or_else(|| {
            CodecError::Truncated(format!("range decoder ran past {} bytes", self.input.len()))
        })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PRECISION;
        let target = (self.code / r).min((1 << PRECISION) - 1);
        let index = table.find(target);
        let (start, freq) = (table.start(index), table.frequency(index));
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(index)
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Integer symbols in coding order: channel-major, `run` symbols per
/// channel (one per latent query).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolStream {
    pub symbols: Vec<i32>,
    pub run: usize,
}

impl SymbolStream {
    /// Reorders a row-major `rows × channels` latent into channel-major
    /// coding order.
    pub fn from_row_major(values: &[i32], rows: usize, channels: usize) -> Result<Self> {
        if values.len() != rows * channels {
            return Err(CodecError::Shape(format!(
                "{} symbols for a {rows}x{channels} latent",
                values.len()
            )));
        }
        let mut symbols = Vec::with_capacity(values.len());
        for c in 0..channels {
            for r in 0..rows {
                symbols.push(values[r * channels + c]);
            }
        }
        Ok(Self { symbols, run: rows })
    }

    /// Inverse of [`SymbolStream::from_row_major`].
    pub fn to_row_major(&self) -> Vec<i32> {
        let rows = self.run;
        let channels = self.symbols.len().checked_div(rows).unwrap_or(0);
        let mut out = vec![0; self.symbols.len()];
        for c in 0..channels {
            for r in 0..rows {
                out[r * channels + c] = self.symbols[c * rows + r];
            }
        }
        out
    }
}

fn check_stream(stream_len: usize, run: usize, tables: &CdfTables) -> Result<()> {
    if run == 0 && stream_len > 0 {
        return Err(CodecError::Shape("zero-length channel runs".into()));
    }
    if run > 0 && stream_len.div_ceil(run) > tables.channels.len() {
        return Err(CodecError::Shape(format!(
            "{stream_len} symbols in runs of {run} need more than {} channel tables",
            tables.channels.len()
        )));
    }
    Ok(())
}

pub fn range_encode(stream: &SymbolStream, tables: &CdfTables) -> Result<Vec<u8>> {
    check_stream(stream.symbols.len(), stream.run, tables)?;
    let mut enc = RangeEncoder::new();
    for (i, &s) in stream.symbols.iter().enumerate() {
        let table = &tables.channels[i / stream.run];
        let index = tables.index_of(i64::from(s), i)?;
        enc.encode_symbol(table, index);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], tables: &CdfTables, count: usize, run: usize) -> Result<SymbolStream> {
    check_stream(count, run, tables)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut symbols = Vec::with_capacity(count);
    for i in 0..count {
        let index = dec.decode_symbol(&tables.channels[i / run])?;
        symbols.push((tables.n_min + index as i64) as i32);
    }
    Ok(SymbolStream { symbols, run })
}
