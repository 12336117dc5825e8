//! Quantization, probability models and the range coder shared by the motion
//! and residual streams.

mod factorized;
mod gaussian;
mod hyper;
mod range;
mod table;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub use factorized::{BoundTables, FactorizedPrior, FactorizedTables};
pub use gaussian::{gaussian_likelihood, GaussianTables, SCALE_BOUND};
pub use hyper::HyperPrior;
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};
pub use table::{CdfTable, SymbolModel, PRECISION, TOTAL};

/// Alphabet bounds of coded symbols.
pub const SYMBOL_MIN: i32 = -255;
pub const SYMBOL_MAX: i32 = 255;
pub const NUM_SYMBOLS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;

/// Smallest probability any likelihood is allowed to report during training.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

pub enum QuantMode<'a> {
    /// Additive `U(-0.5, 0.5)` noise.
    Train(&'a mut ChaCha8Rng),
    /// Rounding, half away from zero, clamped to the alphabet.
    Eval,
}

/// Round half away from zero and clamp to the coder alphabet.
pub fn quantize_value(x: f64) -> i32 {
    (x.round() as i64).clamp(SYMBOL_MIN as i64, SYMBOL_MAX as i64) as i32
}

/// Differentiable in train mode (noise is a constant); eval mode returns a constant tensor.
pub fn quantize(x: &Tensor, mode: QuantMode<'_>) -> Tensor {
    match mode {
        QuantMode::Train(rng) => {
            let noise: Vec<f64> = (0..x.numel()).map(|_| rng.random_range(-0.5..0.5)).collect();
            x.add(&Tensor::new(noise, x.shape()))
        }
        QuantMode::Eval => QuantizedLatent::from_tensor(x).to_tensor(),
    }
}

/// Integer symbols with the shape of the latent they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
}

impl QuantizedLatent {
    pub fn from_tensor(x: &Tensor) -> Self {
        Self {
            shape: x.shape().to_vec(),
            values: x.data().iter().map(|&v| quantize_value(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.values.iter().map(|&v| v as f64).collect(), &self.shape)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `-sum log2 p` of `symbols` under frozen tables.
pub fn estimate_bits(symbols: &[i32], model: &dyn SymbolModel) -> f64 {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| model.table(i).bits(s))
        .sum()
}

/// `-sum log2 p` from a likelihood tensor.
pub fn likelihood_bits(likelihood: &Tensor) -> Tensor {
    likelihood.ln().sum_all().mul_scalar(-1.0 / std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;

    #[test]
    fn rounding_rule() {
        assert_eq!(quantize_value(2.4), 2);
        assert_eq!(quantize_value(-1.5), -2);
        assert_eq!(quantize_value(1.5), 2);
        assert_eq!(quantize_value(-0.4), 0);
        assert_eq!(quantize_value(1e9), SYMBOL_MAX);
        assert_eq!(quantize_value(-1e9), SYMBOL_MIN);
    }

    #[test]
    fn train_noise_is_bounded() {
        let mut rng = stream_rng(0, "q");
        let x = Tensor::new((0..1000).map(|i| i as f64 * 0.37 - 100.0).collect(), &[1000]);
        let y = quantize(&x, QuantMode::Train(&mut rng));
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= 0.5));
        assert!(y.data().iter().zip(x.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn eval_is_idempotent() {
        let x = Tensor::new(vec![0.5, -0.5, 2.49, 300.2, -7.5], &[5]);
        let once = quantize(&x, QuantMode::Eval);
        let twice = quantize(&once, QuantMode::Eval);
        assert_eq!(once.data(), twice.data());
        assert_eq!(once.data(), [1.0, -1.0, 2.0, 255.0, -8.0]);
    }
}
