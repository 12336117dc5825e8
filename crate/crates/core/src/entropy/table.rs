use std::borrow::Cow;

use super::{NUM_SYMBOLS, SYMBOL_MIN};

/// Bits of fixed-point probability precision.
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Frozen cumulative frequencies over the full alphabet.
///
/// Every symbol has frequency at least 1, so any in-alphabet symbol is codable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    /// `NUM_SYMBOLS + 1` entries, `cdf[0] = 0`, `cdf[NUM_SYMBOLS] = TOTAL`.
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability vector (one entry per alphabet symbol).
    /// Non-finite or negative entries are treated as zero.
    pub fn from_probs(probs: &[f64]) -> Self {
        assert_eq!(probs.len(), NUM_SYMBOLS);
        let clean: Vec<f64> = probs.iter().map(|&p| if p.is_finite() && p > 0.0 { p } else { 0.0 }).collect();
        let mass: f64 = clean.iter().sum();
        let spare = (TOTAL as usize - NUM_SYMBOLS) as f64;
        let mut freq: Vec<u32> = clean
            .iter()
            .map(|&p| {
                let share = if mass > 0.0 { p / mass } else { 1.0 / NUM_SYMBOLS as f64 };
                1 + (share * spare).floor() as u32
            })
            .collect();
        let used: u32 = freq.iter().sum();
        let argmax = (0..NUM_SYMBOLS).fold(0, |best, i| if clean[i] > clean[best] { i } else { best });
        freq[argmax] += TOTAL - used;
        let mut cdf = Vec::with_capacity(NUM_SYMBOLS + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Self { cdf }
    }

    pub fn uniform() -> Self {
        Self::from_probs(&vec![1.0; NUM_SYMBOLS])
    }

    /// Builds a table directly from cumulative frequencies (checkpoint load).
    pub fn from_cdf(cdf: Vec<u32>) -> Option<Self> {
        let ok = cdf.len() == NUM_SYMBOLS + 1
            && cdf[0] == 0
            && cdf[NUM_SYMBOLS] == TOTAL
            && cdf.windows(2).all(|w| w[1] > w[0]);
        ok.then_some(Self { cdf })
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    fn index(symbol: i32) -> usize {
        let i = symbol - SYMBOL_MIN;
        assert!((0..NUM_SYMBOLS as i32).contains(&i), "symbol {symbol} outside the alphabet");
        i as usize
    }

    /// `(start, freq)` of a symbol.
    pub fn range(&self, symbol: i32) -> (u32, u32) {
        let i = Self::index(symbol);
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    /// Symbol whose interval contains `target < TOTAL`, with its `(start, freq)`.
    pub fn lookup(&self, target: u32) -> (i32, u32, u32) {
        // first index with cdf[i] > target, minus one
        let i = self.cdf.partition_point(|&c| c <= target) - 1;
        (i as i32 + SYMBOL_MIN, self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    pub fn bits(&self, symbol: i32) -> f64 {
        let (_, f) = self.range(symbol);
        PRECISION as f64 - (f as f64).log2()
    }
}

/// Supplies the table for the `i`-th symbol of a stream.
pub trait SymbolModel {
    fn table(&self, index: usize) -> Cow<'_, CdfTable>;
}

impl SymbolModel for CdfTable {
    fn table(&self, _: usize) -> Cow<'_, CdfTable> {
        Cow::Borrowed(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::SYMBOL_MAX;

    #[test]
    fn tables_are_strictly_monotone_and_complete() {
        let mut probs = vec![0.0; NUM_SYMBOLS];
        probs[255] = 1.0;
        let t = CdfTable::from_probs(&probs);
        assert_eq!(t.cdf()[NUM_SYMBOLS], TOTAL);
        assert!(t.cdf().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t.range(0).1, TOTAL - (NUM_SYMBOLS as u32 - 1));
        assert_eq!(t.range(SYMBOL_MAX).1, 1);
        assert!(CdfTable::from_cdf(t.cdf().to_vec()).is_some());
    }

    #[test]
    fn lookup_inverts_range() {
        let probs: Vec<f64> = (0..NUM_SYMBOLS).map(|i| 1.0 + (i % 7) as f64).collect();
        let t = CdfTable::from_probs(&probs);
        for s in SYMBOL_MIN..=SYMBOL_MAX {
            let (start, f) = t.range(s);
            assert_eq!(t.lookup(start).0, s);
            assert_eq!(t.lookup(start + f - 1).0, s);
        }
    }

    #[test]
    fn uniform_over_256_costs_eight_bits() {
        let mut probs = vec![0.0; NUM_SYMBOLS];
        probs[255..255 + 256].fill(1.0);
        // 8 bits is exact only without the floor; the floor costs < 0.02 bit here
        let t = CdfTable::from_probs(&probs);
        let bits: f64 = (0..100).map(|i| t.bits(i % 256)).sum();
        assert!((bits - 800.0).abs() < 2.0, "{bits}");
    }
}
