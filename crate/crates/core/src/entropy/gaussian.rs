use std::borrow::Cow;

use super::table::{CdfTable, SymbolModel};
use super::{LIKELIHOOD_FLOOR, NUM_SYMBOLS, SYMBOL_MIN};
use crate::tensor::{normal_cdf, Tensor};

/// Smallest scale the hyper-decoder may emit.
pub const SCALE_BOUND: f64 = 0.11;

/// Mass of `N(mu, sigma)` on the unit bin around `y`, floored.
pub fn gaussian_likelihood(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Tensor {
    // evaluate on the lower tail for accuracy: |y - mu| is symmetric
    let v = y.sub(mu).abs();
    let upper = v.neg().add_scalar(0.5).div(sigma).normal_cdf();
    let lower = v.neg().add_scalar(-0.5).div(sigma).normal_cdf();
    upper.sub(&lower).bound_below(LIKELIHOOD_FLOOR)
}

/// Mass of the standard normal on `[lo, hi]`, computed on whichever tail keeps precision.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Per-element tables derived on demand from decoded means and scales.
pub struct GaussianTables {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianTables {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(mu.len(), sigma.len());
        Self { mu, sigma }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn table_at(&self, i: usize) -> CdfTable {
        let (mu, sigma) = (self.mu[i], self.sigma[i].max(SCALE_BOUND));
        let probs: Vec<f64> = (0..NUM_SYMBOLS)
            .map(|k| {
                let s = (k as i32 + SYMBOL_MIN) as f64;
                let lo = if k == 0 { f64::NEG_INFINITY } else { (s - 0.5 - mu) / sigma };
                let hi = if k == NUM_SYMBOLS - 1 { f64::INFINITY } else { (s + 0.5 - mu) / sigma };
                interval_mass(lo, hi)
            })
            .collect();
        CdfTable::from_probs(&probs)
    }
}

impl SymbolModel for GaussianTables {
    fn table(&self, index: usize) -> Cow<'_, CdfTable> {
        Cow::Owned(self.table_at(index))
    }
}
