use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Count budget every quantized PMF sums to.
pub const PMF_TOTAL: u32 = 1 << 16;

/// Integer frequency table over a contiguous run of symbol ids starting at
/// `offset`. Counts sum to [`PMF_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedPmf {
    offset: u32,
    counts: Vec<u32>,
    cumulative: Vec<u32>,
}

impl QuantizedPmf {
    /// Builds a table from raw counts, checking the total.
    pub fn from_counts(offset: u32, counts: Vec<u32>) -> Result<Self> {
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != PMF_TOTAL as u64 {
            return Err(Error::PmfSum(sum as f64 / PMF_TOTAL as f64));
        }
        let mut cumulative = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &c in &counts {
            acc += c;
            cumulative.push(acc);
        }
        Ok(QuantizedPmf { offset, counts, cumulative })
    }

    /// Uniform table over `n` symbols; remainders go to the lowest ids.
    pub fn uniform(offset: u32, n: usize) -> Result<Self> {
        if n == 0 || n > PMF_TOTAL as usize {
            return Err(Error::SupportTooLarge(n));
        }
        let base = PMF_TOTAL / n as u32;
        let extra = (PMF_TOTAL % n as u32) as usize;
        let counts = (0..n).map(|i| base + u32::from(i < extra)).collect();
        Self::from_counts(offset, counts)
    }

    pub fn offset(&self) -> u32 {
        self.offset
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Count of `symbol`, zero when it lies outside the table.
    pub fn count(&self, symbol: u32) -> u32 {
        symbol
            .checked_sub(self.offset)
            .and_then(|i| self.counts.get(i as usize))
            .copied()
            .unwrap_or(0)
    }

    /// Cumulative interval `[lo, hi)` of a codable symbol.
    pub fn interval(&self, symbol: u32) -> Result<(u32, u32)> {
        if self.count(symbol) == 0 {
            return Err(Error::Uncodable { symbol });
        }
        let i = (symbol - self.offset) as usize;
        Ok((self.cumulative[i], self.cumulative[i + 1]))
    }

    /// Symbol whose interval contains `target` (< [`PMF_TOTAL`]).
    pub fn lookup(&self, target: u32) -> (u32, u32, u32) {
        let i = self.cumulative.partition_point(|&c| c <= target) - 1;
        (self.offset + i as u32, self.cumulative[i], self.cumulative[i + 1])
    }

    /// Ideal code length of `symbol` in bits under this table.
    pub fn code_length(&self, symbol: u32) -> f64 {
        -(self.count(symbol) as f64 / PMF_TOTAL as f64).log2()
    }
}

/// Quantizes probabilities over ids `offset..offset + p.len()` to counts
/// summing to 2¹⁶.
///
/// Each symbol gets `floor(p·2¹⁶)` with a minimum of 1. A shortfall is
/// handed out one count at a time by largest fractional remainder among
/// symbols that were not raised to the minimum; an overshoot is taken one
/// count at a time from the largest counts. Ties go to the lower id.
pub fn quantize_pmf(p: &[f64], offset: u32) -> Result<QuantizedPmf> {
    let n = p.len();
    if n == 0 || n > PMF_TOTAL as usize {
        return Err(Error::SupportTooLarge(n));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::PmfSum(f64::NAN));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::PmfSum(sum));
    }
    let scale = PMF_TOTAL as f64;
    let mut counts = Vec::with_capacity(n);
    let mut remainders = Vec::with_capacity(n);
    let mut total: i64 = 0;
    for (i, &x) in p.iter().enumerate() {
        let raw = x * scale;
        let floor = raw.floor();
        let c = if floor < 1.0 { 1 } else { floor as u32 };
        if floor >= 1.0 {
            remainders.push((raw - floor, i));
        }
        counts.push(c);
        total += c as i64;
    }
    let target = PMF_TOTAL as i64;
    if total < target {
        let mut deficit = (target - total) as usize;
        let by_remainder = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if deficit < remainders.len() {
            remainders.select_nth_unstable_by(deficit, by_remainder);
            remainders.truncate(deficit);
        }
        remainders.sort_unstable_by(by_remainder);
        while deficit > 0 {
            for &(_, i) in remainders.iter().take(deficit) {
                counts[i] += 1;
                deficit -= 1;
            }
            if remainders.is_empty() {
                // Every symbol was raised to the minimum; spread evenly.
                for c in counts.iter_mut().take(deficit) {
                    *c += 1;
                }
                break;
            }
        }
    } else if total > target {
        let mut heap: BinaryHeap<(u32, Reverse<usize>)> =
            counts.iter().enumerate().filter(|&(_, &c)| c > 1).map(|(i, &c)| (c, Reverse(i))).collect();
        for _ in 0..total - target {
            let (c, Reverse(i)) = heap.pop().expect("support below 2^16 leaves a count above 1");
            counts[i] = c - 1;
            if c - 1 > 1 {
                heap.push((c - 1, Reverse(i)));
            }
        }
    }
    QuantizedPmf::from_counts(offset, counts)
}
