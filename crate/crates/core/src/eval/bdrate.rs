//! Bjøntegaard delta rate between two rate-quality curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    /// Bits per pixel.
    pub rate: f64,
    /// PSNR in dB or MS-SSIM, depending on the curve.
    pub quality: f64,
}

/// At least four points, strictly increasing in rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!("an RD curve needs at least 4 points, got {}", points.len())));
        }
        if points.iter().any(|p| !(p.rate > 0.0) || !p.quality.is_finite()) {
            return Err(Error::InvalidArgument("RD points need positive rates and finite qualities".into()));
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if points.windows(2).any(|w| w[0].rate == w[1].rate) {
            return Err(Error::InvalidArgument("RD curve rates must be distinct".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn quality_range(&self) -> (f64, f64) {
        let q = self.points.iter().map(|p| p.quality);
        (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
    }

    /// Least-squares cubic `ln(rate) = c0 + c1 q + c2 q^2 + c3 q^3`.
    fn log_rate_cubic(&self) -> Result<[f64; 4]> {
        let n = self.points.len();
        let v = DMatrix::from_fn(n, 4, |i, j| self.points[i].quality.powi(j as i32));
        let y = DVector::from_iterator(n, self.points.iter().map(|p| p.rate.ln()));
        let c = v
            .svd(true, true)
            .solve(&y, 1e-14)
            .map_err(|e| Error::InvalidArgument(format!("cubic fit failed: {e}")))?;
        Ok([c[0], c[1], c[2], c[3]])
    }
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |q: f64| c[0] * q + c[1] * q * q / 2.0 + c[2] * q.powi(3) / 3.0 + c[3] * q.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average rate change of `test` against `anchor` over their shared quality
/// interval, in percent (negative means `test` needs fewer bits).
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let (ta, tb) = test.quality_range();
    let (aa, ab) = anchor.quality_range();
    let (lo, hi) = (ta.max(aa), tb.min(ab));
    if !(hi > lo) {
        return Err(Error::NoOverlap);
    }
    let (ct, ca) = (test.log_rate_cubic()?, anchor.log_rate_cubic()?);
    let avg = (integral(&ct, lo, hi) - integral(&ca, lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(rates: &[f64], quals: &[f64]) -> RdCurve {
        RdCurve::new(rates.iter().zip(quals).map(|(&rate, &quality)| RdPoint { rate, quality }).collect()).unwrap()
    }

    #[test]
    fn identical_and_scaled_curves() {
        let a = curve(&[0.05, 0.1, 0.2, 0.4], &[30.1, 32.6, 35.0, 37.2]);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let scaled = curve(&[0.055, 0.11, 0.22, 0.44], &[30.1, 32.6, 35.0, 37.2]);
        assert!((bd_rate(&scaled, &a).unwrap() - 10.0).abs() < 0.01);
    }

    #[test]
    fn matches_reference_implementation() {
        // numpy polyfit/polyint Bjøntegaard on the same points
        let anchor = curve(&[0.05, 0.10, 0.20, 0.40], &[30.1, 32.6, 35.0, 37.2]);
        let test = curve(&[0.045, 0.085, 0.175, 0.36], &[30.4, 32.9, 35.1, 37.6]);
        assert!((bd_rate(&test, &anchor).unwrap() - -18.68665064774746).abs() <= 0.05);
        let anchor = curve(&[1200.0, 2500.0, 5100.0, 9800.0], &[0.951, 0.968, 0.979, 0.987]);
        let test = curve(&[1000.0, 2300.0, 4500.0, 9900.0], &[0.949, 0.970, 0.980, 0.989]);
        assert!((bd_rate(&test, &anchor).unwrap() - -16.71642901909729).abs() <= 0.05);
    }

    #[test]
    fn rejects_bad_curves() {
        let a = curve(&[0.05, 0.1, 0.2, 0.4], &[30.0, 31.0, 32.0, 33.0]);
        let b = curve(&[0.05, 0.1, 0.2, 0.4], &[40.0, 41.0, 42.0, 43.0]);
        assert!(matches!(bd_rate(&a, &b), Err(Error::NoOverlap)));
        assert!(RdCurve::new(vec![RdPoint { rate: 1.0, quality: 1.0 }; 3]).is_err());
        assert!(RdCurve::new(vec![RdPoint { rate: 1.0, quality: 1.0 }; 4]).is_err());
    }

    proptest! {
        #[test]
        fn swapping_curves_inverts_the_ratio(shift in -0.3f64..0.3, tilt in -0.02f64..0.02) {
            let q = [30.0, 32.0, 34.0, 36.0, 38.0];
            let a: Vec<f64> = q.iter().map(|q| (0.1 * (q - 30.0f64)).exp() * 0.05).collect();
            let b: Vec<f64> = a.iter().zip(&q).map(|(r, q)| r * (shift + tilt * (q - 34.0)).exp()).collect();
            let (ca, cb) = (curve(&a, &q), curve(&b, &q));
            let x = bd_rate(&cb, &ca).unwrap() / 100.0;
            let y = bd_rate(&ca, &cb).unwrap() / 100.0;
            prop_assert!(((1.0 + x) * (1.0 + y) - 1.0).abs() < 1e-9);
            prop_assert!(bd_rate(&ca, &ca).unwrap().abs() < 1e-9);
        }
    }
}
