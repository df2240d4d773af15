//! Integer cumulative tables bridging the continuous prior to the range
//! coder.

use crate::entropy::prior::FactorizedPrior;
use crate::error::{CodecError, Result};

/// Probability precision of every table, in bits.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Cumulative frequencies `[0, f₀, f₀+f₁, …, 2¹⁶]`; every interval is at
/// least one wide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn from_cdf(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(CodecError::Format(format!(
                "cumulative table must run from 0 to {TOTAL} with at least one symbol"
            )));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CodecError::Format(
                "cumulative table has a zero-width interval".into(),
            ));
        }
        Ok(Self { cdf })
    }

    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &f in freqs {
            acc += u64::from(f);
            if acc > u64::from(TOTAL) {
                return Err(CodecError::Format("frequencies exceed 2^16".into()));
            }
            cdf.push(acc as u32);
        }
        Self::from_cdf(cdf)
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    #[inline]
    pub fn start(&self, index: usize) -> u32 {
        self.cdf[index]
    }

    #[inline]
    pub fn frequency(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the interval containing `target < 2¹⁶`.
    #[inline]
    pub fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Code length of one symbol under this table, in bits.
    pub fn bits(&self, index: usize) -> f64 {
        f64::from(PRECISION) - f64::from(self.frequency(index)).log2()
    }
}

/// Converts a probability vector into a 16-bit table. Each symbol first gets
/// one count, the remaining `2¹⁶ − k` counts are split proportionally by
/// largest remainder (ties to the lower index).
pub fn quantize_pmf(pmf: &[f64]) -> Result<CdfTable> {
    let k = pmf.len();
    if k == 0 || k > TOTAL as usize {
        return Err(CodecError::InvalidInput(format!(
            "cannot build a 16-bit table over {k} symbols"
        )));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CodecError::NonFinite("probability table entry".into()));
    }
    let sum: f64 = pmf.iter().sum();
    let spare = u64::from(TOTAL) - k as u64;
    let mut freqs = vec![1u64; k];
    let mut remainders = Vec::with_capacity(k);
    let mut used = 0u64;
    for (i, &p) in pmf.iter().enumerate() {
        let share = if sum > 0.0 {
            p / sum * spare as f64
        } else {
            spare as f64 / k as f64
        };
        let whole = share.floor() as u64;
        freqs[i] += whole;
        used += whole;
        remainders.push((share - whole as f64, i));
    }
    let mut left = spare - used.min(spare);
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().cycle() {
        if left == 0 {
            break;
        }
        freqs[i] += 1;
        left -= 1;
    }
    let freqs: Vec<u32> = freqs.into_iter().map(|f| f as u32).collect();
    CdfTable::from_frequencies(&freqs)
}

/// Per-channel tables over a shared integer support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTables {
    pub n_min: i64,
    pub n_max: i64,
    pub channels: Vec<CdfTable>,
}

impl CdfTables {
    pub fn support_len(&self) -> usize {
        (self.n_max - self.n_min + 1) as usize
    }

    /// Index of `symbol` in the support, or an error naming `position`.
    pub fn index_of(&self, symbol: i64, position: usize) -> Result<usize> {
        if symbol < self.n_min || symbol > self.n_max {
            return Err(CodecError::OutOfSupport {
                index: position,
                symbol,
                min: self.n_min,
                max: self.n_max,
            });
        }
        Ok((symbol - self.n_min) as usize)
    }

    /// Ideal code length of a channel-major symbol stream with `run`
    /// symbols per channel.
    pub fn cross_entropy_bits(&self, symbols: &[i32], run: usize) -> Result<f64> {
        let mut bits = 0.0;
        for (i, &s) in symbols.iter().enumerate() {
            let table = &self.channels[i / run];
            bits += table.bits(self.index_of(i64::from(s), i)?);
        }
        Ok(bits)
    }
}

/// Support `[min − 1, max + 1]` of a set of integer symbols.
pub fn support_for(symbols: &[i32]) -> (i64, i64) {
    let min = symbols.iter().copied().min().unwrap_or(0);
    let max = symbols.iter().copied().max().unwrap_or(0);
    (i64::from(min) - 1, i64::from(max) + 1)
}

pub fn check_support(n_min: i64, n_max: i64, max_width: usize) -> Result<()> {
    if n_max < n_min || (n_max - n_min + 1) as u64 > max_width as u64 {
        return Err(CodecError::Diverged {
            min: n_min,
            max: n_max,
            limit: max_width,
        });
    }
    Ok(())
}

pub fn build_cdf_tables(
    prior: &FactorizedPrior,
    n_min: i64,
    n_max: i64,
    max_width: usize,
) -> Result<CdfTables> {
    check_support(n_min, n_max, max_width)?;
    let channels = (0..prior.channels())
        .map(|c| quantize_pmf(&prior.pmf(c, n_min, n_max)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CdfTables {
        n_min,
        n_max,
        channels,
    })
}
