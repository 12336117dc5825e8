use std::borrow::Cow;

use super::table::{CdfTable, SymbolModel};
use super::{LIKELIHOOD_FLOOR, NUM_SYMBOLS, SYMBOL_MIN};
use crate::nn::{Init, ParamBuilder, ParamId, Params};
use crate::tensor::Tensor;

/// Per-channel density: a mixture of `K` logistics, integrated over unit bins.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub logits: ParamId,
    pub means: ParamId,
    pub log_scales: ParamId,
    pub channels: usize,
    pub components: usize,
}

impl FactorizedPrior {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, components: usize) -> Self {
        let mut s = pb.scope(name);
        let centre = (components as f64 - 1.0) / 2.0;
        let means: Vec<f64> = (0..channels)
            .flat_map(|_| (0..components).map(move |k| (k as f64 - centre) * 2.0))
            .collect();
        Self {
            logits: s.tensor("logits", &[channels, 1, components], Init::Zeros),
            means: s.with_values("means", &[channels, 1, components], means),
            log_scales: s.tensor("log_scales", &[channels, 1, components], Init::Const(0.0)),
            channels,
            components,
        }
    }

    /// Mixture CDF at `points: [C, N]`, returning `[C, N]`.
    fn cdf(&self, p: &Params, points: &Tensor) -> Tensor {
        let (c, n) = (points.dim(0), points.dim(1));
        let weights = p.get(self.logits).softmax_last();
        let inv_scale = p.get(self.log_scales).neg().exp();
        points
            .reshape(&[c, n, 1])
            .sub(p.get(self.means))
            .mul(&inv_scale)
            .sigmoid()
            .mul(&weights)
            .sum_axis(2)
    }

    /// Probability mass of the unit bin around each element of `y: [C, ...]`,
    /// floored at the coder's minimum probability.
    pub fn likelihood(&self, p: &Params, y: &Tensor) -> Tensor {
        let c = y.dim(0);
        assert_eq!(c, self.channels, "latent has {c} channels, prior expects {}", self.channels);
        let flat = y.reshape(&[c, y.numel() / c]);
        let upper = self.cdf(p, &flat.add_scalar(0.5));
        let lower = self.cdf(p, &flat.add_scalar(-0.5));
        upper.sub(&lower).bound_below(LIKELIHOOD_FLOOR).reshape(y.shape())
    }

    /// Freezes the density into one table per channel.
    pub fn tables(&self, p: &Params) -> FactorizedTables {
        let c = self.channels;
        // bin edges s - 0.5 for every symbol, plus the upper edge of the last
        let edges: Vec<f64> = (0..=NUM_SYMBOLS).map(|i| (i as i32 + SYMBOL_MIN) as f64 - 0.5).collect();
        let pts = Tensor::new(edges.iter().cycle().take(c * edges.len()).copied().collect(), &[c, edges.len()]);
        let cdf = crate::tensor::no_grad(|| self.cdf(p, &pts));
        let tables = (0..c)
            .map(|ch| {
                let row = &cdf.data()[ch * edges.len()..(ch + 1) * edges.len()];
                let probs: Vec<f64> = (0..NUM_SYMBOLS)
                    .map(|i| {
                        // the outermost bins absorb the tails
                        let lo = if i == 0 { 0.0 } else { row[i] };
                        let hi = if i == NUM_SYMBOLS - 1 { 1.0 } else { row[i + 1] };
                        hi - lo
                    })
                    .collect();
                CdfTable::from_probs(&probs)
            })
            .collect();
        FactorizedTables { tables }
    }
}

/// One frozen table per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedTables {
    pub tables: Vec<CdfTable>,
}

impl FactorizedTables {
    /// Symbol model for a latent whose channels each hold `plane` symbols.
    pub fn bind(&self, plane: usize) -> BoundTables<'_> {
        BoundTables {
            tables: &self.tables,
            plane: plane.max(1),
        }
    }
}

/// Borrowed view of [`FactorizedTables`] for a particular latent shape.
pub struct BoundTables<'a> {
    tables: &'a [CdfTable],
    plane: usize,
}

impl SymbolModel for BoundTables<'_> {
    fn table(&self, index: usize) -> Cow<'_, CdfTable> {
        Cow::Borrowed(&self.tables[index / self.plane])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{estimate_bits, likelihood_bits, range_decode, range_encode};

    fn prior() -> (Params, FactorizedPrior) {
        let mut p = Params::default();
        let f = FactorizedPrior::new(&mut ParamBuilder::new(&mut p, 1), "f", 2, 3);
        (p, f)
    }

    #[test]
    fn bin_masses_sum_to_one() {
        let (p, f) = prior();
        let y = Tensor::new((-40..=40).flat_map(|v| [v as f64, v as f64]).collect(), &[81, 2]);
        let y = y.permute(&[1, 0]);
        let l = f.likelihood(&p, &y);
        for c in 0..2 {
            let s: f64 = l.data()[c * 81..(c + 1) * 81].iter().sum();
            // floor adds mass in the far tails only
            assert!((s - 1.0).abs() < 1e-2, "{s}");
        }
    }

    #[test]
    fn tables_roundtrip_and_match_training_estimate() {
        let (p, f) = prior();
        let y: Vec<f64> = (0..200).map(|i| ((i * 7) % 9) as f64 - 4.0).collect();
        let yt = Tensor::new(y.clone(), &[2, 10, 10]);
        let bits_train = likelihood_bits(&f.likelihood(&p, &yt)).item();
        let tables = f.tables(&p);
        let tables = tables.bind(100);
        let syms: Vec<i32> = y.iter().map(|&v| v as i32).collect();
        let bits_eval = estimate_bits(&syms, &tables);
        assert!((bits_train - bits_eval).abs() / bits_train < 0.01, "{bits_train} vs {bits_eval}");
        let bytes = range_encode(&syms, &tables);
        assert_eq!(range_decode(&bytes, &tables, 200).unwrap(), syms);
    }

    #[test]
    fn parameters_receive_gradients() {
        let (p, f) = prior();
        let y = Tensor::new(vec![0.3, -1.2, 2.2, 0.0], &[2, 2]);
        let g = likelihood_bits(&f.likelihood(&p, &y)).backward();
        for id in [f.logits, f.means, f.log_scales] {
            assert!(g.get_or_zeros(p.get(id)).iter().any(|v| *v != 0.0));
        }
    }
}
