use std::io::Write;

use super::pmf::{QuantizedPmf, PMF_TOTAL};
use crate::error::{Error, Result};

const CODE_BITS: u32 = 32;
const TOP: u64 = (1 << CODE_BITS) - 1;
const HALF: u64 = 1 << (CODE_BITS - 1);
const QUARTER: u64 = 1 << (CODE_BITS - 2);

/// Bits the decoder reads beyond the encoded length: its register is
/// `CODE_BITS` wide while the encoder's final flush writes only two bits.
const LOOKAHEAD: u64 = CODE_BITS as u64 - 2;

/// Coded output with its exact length in bits. Unused bits of the last
/// byte are zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

impl Bitstream {
    /// Serialized form: `bit_len` as u64 LE, then the bytes.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.bit_len.to_le_bytes())?;
        w.write_all(&self.bytes)?;
        Ok(())
    }

    /// Parses the serialized form, which must fill `data` exactly.
    pub fn parse(data: &[u8]) -> Result<Self> {
        if data.len() < 8 {
            return Err(Error::Truncated);
        }
        let bit_len = u64::from_le_bytes(data[..8].try_into().unwrap());
        let bytes = &data[8..];
        let need = bit_len.div_ceil(8);
        if (bytes.len() as u64) < need {
            return Err(Error::Truncated);
        }
        if bytes.len() as u64 > need {
            return Err(Error::Corrupt);
        }
        Ok(Bitstream { bytes: bytes.to_vec(), bit_len })
    }

    pub fn serialized_len(&self) -> usize {
        8 + self.bytes.len()
    }

    fn push(&mut self, bit: bool) {
        if self.bit_len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bit_len % 8);
        }
        self.bit_len += 1;
    }
}

/// Integer arithmetic encoder with 32-bit registers and deferred
/// underflow bits.
#[derive(Debug)]
pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: Bitstream,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { low: 0, high: TOP, pending: 0, out: Bitstream::default() }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, pmf: &QuantizedPmf, symbol: u32) -> Result<()> {
        let (lo, hi) = pmf.interval(symbol)?;
        let range = self.high - self.low + 1;
        let total = PMF_TOTAL as u64;
        self.high = self.low + range * hi as u64 / total - 1;
        self.low += range * lo as u64 / total;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        Ok(())
    }

    /// Writes two disambiguating bits and returns the stream.
    pub fn finish(mut self) -> Bitstream {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out
    }
}

/// Inverse of [`Encoder`]. Bits past the end of the stream read as zero.
#[derive(Debug)]
pub struct Decoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    stream: &'a Bitstream,
    read: u64,
}

impl<'a> Decoder<'a> {
    pub fn new(stream: &'a Bitstream) -> Result<Self> {
        if (stream.bytes.len() as u64) < stream.bit_len.div_ceil(8) {
            return Err(Error::Truncated);
        }
        let mut d = Decoder { low: 0, high: TOP, value: 0, stream, read: 0 };
        for _ in 0..CODE_BITS {
            d.value = (d.value << 1) | d.next_bit();
        }
        Ok(d)
    }

    fn next_bit(&mut self) -> u64 {
        let i = self.read;
        self.read += 1;
        if i >= self.stream.bit_len {
            return 0;
        }
        u64::from((self.stream.bytes[(i / 8) as usize] >> (7 - i % 8)) & 1)
    }

    pub fn decode(&mut self, pmf: &QuantizedPmf) -> Result<u32> {
        if self.read > self.stream.bit_len + LOOKAHEAD {
            return Err(Error::Corrupt);
        }
        let range = self.high - self.low + 1;
        let total = PMF_TOTAL as u64;
        let target = ((self.value - self.low + 1) * total - 1) / range;
        let (symbol, lo, hi) = pmf.lookup(target as u32);
        self.high = self.low + range * hi as u64 / total - 1;
        self.low += range * lo as u64 / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit();
        }
        Ok(symbol)
    }

    /// Checks that decoding used the stream exactly.
    pub fn finish(self) -> Result<()> {
        if self.read != self.stream.bit_len + LOOKAHEAD {
            return Err(Error::Corrupt);
        }
        Ok(())
    }
}

/// Encodes `symbols`; `pmf(t, history)` supplies the table for position
/// `t` given the symbols before it.
pub fn ac_encode(
    symbols: &[u32],
    mut pmf: impl FnMut(usize, &[u32]) -> Result<QuantizedPmf>,
) -> Result<Bitstream> {
    let mut enc = Encoder::new();
    for (t, &s) in symbols.iter().enumerate() {
        let table = pmf(t, &symbols[..t])?;
        enc.encode(&table, s)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols with the same provider contract as [`ac_encode`].
pub fn ac_decode(
    bits: &Bitstream,
    mut pmf: impl FnMut(usize, &[u32]) -> Result<QuantizedPmf>,
    count: usize,
) -> Result<Vec<u32>> {
    let mut dec = Decoder::new(bits)?;
    let mut out = Vec::with_capacity(count);
    for t in 0..count {
        let table = pmf(t, &out)?;
        let s = dec.decode(&table)?;
        out.push(s);
    }
    dec.finish()?;
    Ok(out)
}
