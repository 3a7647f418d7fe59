//! Carry-less 32-bit range coder with 16-bit frequency tables.

use crate::error::{Error, Result};

/// Frequency precision in bits; every table sums to `1 << PRECISION`.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Checks that `cdf` is a valid cumulative table: starts at 0, strictly
/// increasing, ends at [`TOTAL`].
pub fn validate_cdf(cdf: &[u32]) -> Result<()> {
    if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
        return Err(Error::Coder(format!("cdf must start at 0 and end at {TOTAL}")));
    }
    if cdf.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Coder("cdf has a zero-frequency symbol".into()));
    }
    Ok(())
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes the interval `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        self.range >>= PRECISION;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode_symbol(&mut self, cdf: &[u32], symbol: usize) {
        self.encode(cdf[symbol], cdf[symbol + 1] - cdf[symbol]);
    }

    /// Encodes `value < TOTAL` with a flat distribution.
    pub fn encode_bypass(&mut self, value: u32) {
        self.encode(value, 1);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte()? as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Stream("truncated entropy-coded payload".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&mut self) -> Result<u32> {
        self.range >>= PRECISION;
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= TOTAL {
            return Err(Error::Stream("corrupt entropy-coded payload".into()));
        }
        Ok(v)
    }

    fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_symbol(&mut self, cdf: &[u32]) -> Result<usize> {
        let v = self.target()?;
        // last index with cdf[s] <= v
        let s = cdf.partition_point(|&c| c <= v) - 1;
        if s + 1 >= cdf.len() {
            return Err(Error::Stream("decoded symbol outside table".into()));
        }
        self.consume(cdf[s], cdf[s + 1] - cdf[s])?;
        Ok(s)
    }

    pub fn decode_bypass(&mut self) -> Result<u32> {
        let v = self.target()?;
        self.consume(v, 1)?;
        Ok(v)
    }

    /// Fails unless every payload byte was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Stream(format!(
                "{} trailing bytes after entropy-coded payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Encodes one symbol per table.
pub fn range_encode(symbols: &[usize], cdfs: &[&[u32]]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Coder(format!(
            "{} symbols but {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        validate_cdf(cdf)?;
        if s + 1 >= cdf.len() {
            return Err(Error::Coder(format!(
                "symbol {s} outside alphabet of {}",
                cdf.len() - 1
            )));
        }
        enc.encode_symbol(cdf, s);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], cdfs: &[&[u32]]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(cdfs.len());
    for cdf in cdfs {
        validate_cdf(cdf)?;
        out.push(dec.decode_symbol(cdf)?);
    }
    dec.finish()?;
    Ok(out)
}
