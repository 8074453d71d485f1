//! Carry-less byte-oriented range coder (Subbotin construction) over 16-bit
//! cumulative frequency tables, with a raw-bit bypass mode.
//!
//! All coder arithmetic is on integers, so streams are identical on every
//! platform. The decoder consumes exactly the bytes the encoder produced;
//! asking for more is reported as corruption.

use crate::error::{CodecError, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Largest alphabet a table may have.
pub const MAX_ALPHABET: usize = (PROB_TOTAL - 1) as usize;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;
const FLUSH_BYTES: usize = 8;
const BYPASS_CHUNK: u32 = 16;

/// Cumulative frequencies `cdf[0] = 0 < cdf[1] < ... < cdf[n] = 65536`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.len() > MAX_ALPHABET {
            return Err(CodecError::Range(format!("alphabet of {} symbols", freqs.len())));
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        cdf.push(0u32);
        let mut acc = 0u32;
        for &f in freqs {
            if f == 0 {
                return Err(CodecError::Range("zero symbol frequency".into()));
            }
            acc = acc
                .checked_add(f)
                .filter(|&a| a <= PROB_TOTAL)
                .ok_or_else(|| CodecError::Range("frequencies exceed 2^16".into()))?;
            cdf.push(acc);
        }
        if acc != PROB_TOTAL {
            return Err(CodecError::Range(format!("frequencies sum to {acc}, not 2^16")));
        }
        Ok(CdfTable { cdf })
    }

    /// Integer table approximating `pmf`. Every symbol gets at least one
    /// count; the rest is apportioned by largest remainder with ties to the
    /// lower index. Negative or non-finite entries count as zero mass.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        let mut freqs = Vec::new();
        let mut scratch = Vec::new();
        apportion(pmf, &mut freqs, &mut scratch)?;
        CdfTable::from_frequencies(&freqs)
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    #[inline]
    pub fn cum(&self, s: usize) -> u32 {
        self.cdf[s]
    }

    #[inline]
    pub fn freq(&self, s: usize) -> u32 {
        self.cdf[s + 1] - self.cdf[s]
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// Code length of `s` in bits.
    pub fn cost_bits(&self, s: usize) -> f64 {
        PROB_BITS as f64 - (self.freq(s) as f64).log2()
    }
}

/// Largest-remainder apportionment of 2^16 counts, minimum one per symbol.
pub(crate) fn apportion(pmf: &[f64], freqs: &mut Vec<u32>, order: &mut Vec<usize>) -> Result<()> {
    let n = pmf.len();
    if n == 0 || n > MAX_ALPHABET {
        return Err(CodecError::Range(format!("alphabet of {n} symbols")));
    }
    let clean = |p: f64| if p.is_finite() && p > 0.0 { p } else { 0.0 };
    let total: f64 = pmf.iter().map(|&p| clean(p)).sum();
    let scale = if total > 0.0 { PROB_TOTAL as f64 / total } else { 0.0 };

    freqs.clear();
    let mut sum: i64 = 0;
    for &p in pmf {
        let ideal = clean(p) * scale;
        let f = (ideal.floor() as u32).max(1);
        freqs.push(f);
        sum += f as i64;
    }
    let mut deficit = PROB_TOTAL as i64 - sum;
    if deficit > 0 {
        order.clear();
        order.extend(0..n);
        let rem = |i: usize| clean(pmf[i]) * scale - freqs[i] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        let mut k = 0;
        while deficit > 0 {
            freqs[order[k % n]] += 1;
            deficit -= 1;
            k += 1;
        }
    } else if deficit < 0 {
        // The one-count minimum overdrew; take back from the largest counts.
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        while deficit < 0 {
            let mut progressed = false;
            for &i in order.iter() {
                if deficit == 0 {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    deficit += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(CodecError::Range("alphabet too large for 16-bit table".into()));
            }
        }
    }
    Ok(())
}

/// Encoder state. `finish` consumes it, so a stream is flushed exactly once.
#[derive(Debug, Clone)]
pub struct Encoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) {
        self.encode_freq(table.cum(symbol), table.freq(symbol));
    }

    pub fn encode_cdf(&mut self, cdf: &[u32], symbol: usize) {
        self.encode_freq(cdf[symbol], cdf[symbol + 1] - cdf[symbol]);
    }

    #[inline]
    pub fn encode_freq(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        self.normalize();
    }

    /// Codes the low `bits` bits of `value` at probability 1/2 each.
    pub fn encode_bypass(&mut self, value: u32, bits: u32) {
        assert!(bits <= 32, "bypass codes at most 32 bits");
        let mut left = bits;
        while left > 0 {
            let n = left.min(BYPASS_CHUNK);
            left -= n;
            let chunk = (value >> left) as u64 & ((1u64 << n) - 1);
            let r = self.range >> n;
            self.low = self.low.wrapping_add(r * chunk);
            self.range = r;
            self.normalize();
        }
    }

    #[inline]
    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Bytes emitted so far, not counting the final flush.
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < FLUSH_BYTES {
            return Err(CodecError::corrupt("range coder", "stream shorter than its flush"));
        }
        let mut code = 0u64;
        for &b in &data[..FLUSH_BYTES] {
            code = code << 8 | b as u64;
        }
        Ok(Decoder {
            low: 0,
            range: u64::MAX,
            code,
            data,
            pos: FLUSH_BYTES,
        })
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        self.decode_cdf(&table.cdf)
    }

    /// Decodes against a raw cumulative table (`cdf[0] = 0`, last `= 2^16`).
    pub fn decode_cdf(&mut self, cdf: &[u32]) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = (self.code.wrapping_sub(self.low) / r).min(PROB_TOTAL as u64 - 1) as u32;
        let s = cdf.partition_point(|&c| c <= target) - 1;
        let (lo, hi) = (cdf[s], cdf[s + 1]);
        self.low = self.low.wrapping_add(r * lo as u64);
        self.range = r * (hi - lo) as u64;
        self.normalize()?;
        Ok(s)
    }

    pub fn decode_bypass(&mut self, bits: u32) -> Result<u32> {
        assert!(bits <= 32, "bypass codes at most 32 bits");
        let mut value = 0u64;
        let mut left = bits;
        while left > 0 {
            let n = left.min(BYPASS_CHUNK);
            left -= n;
            let r = self.range >> n;
            let chunk = (self.code.wrapping_sub(self.low) / r).min((1u64 << n) - 1);
            self.low = self.low.wrapping_add(r * chunk);
            self.range = r;
            self.normalize()?;
            value = value << n | chunk;
        }
        Ok(value as u32)
    }

    #[inline]
    fn normalize(&mut self) -> Result<()> {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    return Ok(());
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| CodecError::corrupt("range coder", "stream exhausted"))?;
            self.pos += 1;
            self.code = self.code << 8 | byte as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
