//! Bit-free multi-reference refinement of the coarse prediction.
//!
//! Up to three decoded reference features are aligned to the coarse
//! prediction by an uncoded copy of the motion network, then fused with it
//! through channel and spatial attention. Nothing here produces bits.

use std::collections::VecDeque;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamBuilder, Params};
use crate::rdt::Aligner;
use crate::tensor::{Conv2dSpec, Tensor};
use crate::transform::FrameFeature;

/// Number of fine predictions the fusion consumes.
pub const FINE_REFS: usize = 3;

/// Decoded reference features, newest first.
#[derive(Clone, Debug)]
pub struct ReferenceBuffer {
    entries: VecDeque<FrameFeature>,
    capacity: usize,
}

impl ReferenceBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "reference buffer needs room for one frame");
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, feature: FrameFeature) {
        self.entries.push_front(feature);
        self.entries.truncate(self.capacity);
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Result<&FrameFeature> {
        self.entries.front().ok_or(Error::EmptyReferenceBuffer)
    }

    pub fn entries(&self) -> impl Iterator<Item = &FrameFeature> {
        self.entries.iter()
    }

    pub fn pad_references(&self) -> Result<[FrameFeature; FINE_REFS]> {
        let v: Vec<FrameFeature> = self.entries.iter().cloned().collect();
        pad_references(&v)
    }
}

/// Which buffer slot fills each of the three reference positions: the
/// available entries in order, then the oldest one repeated.
pub fn padded_indices(len: usize) -> Result<[usize; FINE_REFS]> {
    if len == 0 {
        return Err(Error::EmptyReferenceBuffer);
    }
    Ok(std::array::from_fn(|i| i.min(len - 1)))
}

/// `[A] -> (A, A, A)`, `[A, B] -> (A, B, B)`, `[A, B, C] -> (A, B, C)`.
pub fn pad_references<T: Clone>(buf: &[T]) -> Result<[T; FINE_REFS]> {
    let idx = padded_indices(buf.len())?;
    Ok(idx.map(|i| buf[i].clone()))
}

/// CBAM-style channel attention, 1x1 reduction and spatial attention.
#[derive(Clone, Debug)]
pub struct PredictionFusion {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub reduce: Conv2d,
    pub spatial: Conv2d,
}

/// Intermediate maps of one fusion pass.
pub struct FusionTrace {
    pub channel_attention: Tensor,
    pub reduced: Tensor,
    pub spatial_attention: Tensor,
    pub fused: Tensor,
}

impl PredictionFusion {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        let mut s = pb.scope("fusion");
        let cat = channels * (FINE_REFS + 1);
        let hidden = (cat / 16).max(1);
        Self {
            mlp1: Linear::new(&mut s, "mlp1", cat, hidden, Init::Fan(cat)),
            mlp2: Linear::new(&mut s, "mlp2", hidden, cat, Init::Fan(hidden)),
            reduce: Conv2d::same(&mut s, "reduce", cat, channels, 1),
            spatial: Conv2d::new(
                &mut s,
                "spatial",
                2,
                1,
                7,
                Conv2dSpec {
                    stride: 1,
                    padding: 3,
                    groups: 1,
                },
            ),
        }
    }

    pub fn trace(&self, p: &Params, coarse: &FrameFeature, fine: &[FrameFeature; FINE_REFS]) -> FusionTrace {
        let (_, h, w) = coarse.chw();
        let cat = Tensor::concat(&[coarse, &fine[0], &fine[1], &fine[2]], 0);
        let n = cat.dim(0);
        let flat = cat.reshape(&[n, h * w]);
        let pooled = Tensor::concat(&[&flat.mean_axis(1).reshape(&[1, n]), &flat.max_axis(1).reshape(&[1, n])], 0);
        let mlp = self.mlp2.forward(p, &self.mlp1.forward(p, &pooled).relu());
        let ch = mlp.sum_axis(0).sigmoid().reshape(&[n, 1, 1]);
        let reduced = self.reduce.forward(p, &cat.mul(&ch)).relu();
        let c = reduced.dim(0);
        let rflat = reduced.reshape(&[c, h * w]);
        let stats = Tensor::concat(&[&rflat.mean_axis(0).reshape(&[1, h, w]), &rflat.max_axis(0).reshape(&[1, h, w])], 0);
        let sp = self.spatial.forward(p, &stats).sigmoid();
        let fused = reduced.mul(&sp).add(coarse);
        FusionTrace {
            channel_attention: ch,
            reduced,
            spatial_attention: sp,
            fused,
        }
    }

    pub fn fuse_predictions(&self, p: &Params, coarse: &FrameFeature, fine: &[FrameFeature; FINE_REFS]) -> FrameFeature {
        self.trace(p, coarse, fine).fused
    }
}

/// Coarse, aligned and fused predictions of one frame.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub coarse: FrameFeature,
    pub fine: Option<[FrameFeature; FINE_REFS]>,
    pub fused: FrameFeature,
}

#[derive(Clone, Debug)]
pub struct MultiGranularity {
    pub aligner: Aligner,
    pub fusion: PredictionFusion,
}

impl MultiGranularity {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("mgp");
        Self {
            aligner: Aligner::new(&mut s, cfg),
            fusion: PredictionFusion::new(&mut s, cfg.channels),
        }
    }

    pub fn refine(&self, p: &Params, coarse: FrameFeature, refs: &[FrameFeature; FINE_REFS]) -> Result<PredictionSet> {
        let mut fine = Vec::with_capacity(FINE_REFS);
        for r in refs {
            fine.push(self.aligner.align_to_coarse(p, &coarse, r)?);
        }
        let fine: [FrameFeature; FINE_REFS] = fine.try_into().expect("three aligned features");
        let fused = self.fusion.fuse_predictions(p, &coarse, &fine);
        Ok(PredictionSet {
            coarse,
            fine: Some(fine),
            fused,
        })
    }
}

pub fn compute_residual(cur: &FrameFeature, pred: &FrameFeature) -> Result<FrameFeature> {
    if cur.shape() != pred.shape() {
        return Err(Error::Shape(format!("residual of {:?} and {:?}", cur.shape(), pred.shape())));
    }
    Ok(cur.sub(pred))
}

pub fn add_prediction(resi_hat: &FrameFeature, pred: &FrameFeature) -> Result<FrameFeature> {
    if resi_hat.shape() != pred.shape() {
        return Err(Error::Shape(format!("cannot add {:?} to {:?}", resi_hat.shape(), pred.shape())));
    }
    Ok(resi_hat.add(pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::nn::stream_rng(seed, "mgp");
        Tensor::new((0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn padding_rule() {
        assert_eq!(pad_references(&["A"]).unwrap(), ["A", "A", "A"]);
        assert_eq!(pad_references(&["A", "B"]).unwrap(), ["A", "B", "B"]);
        assert_eq!(pad_references(&["A", "B", "C"]).unwrap(), ["A", "B", "C"]);
        assert!(matches!(pad_references::<u8>(&[]), Err(Error::EmptyReferenceBuffer)));
    }

    proptest! {
        #[test]
        fn padding_keeps_recency_order(len in 1usize..6) {
            let buf: Vec<usize> = (0..len).collect();
            let out = pad_references(&buf).unwrap();
            prop_assert_eq!(out[0], 0);
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(out[2], (len - 1).min(2));
        }
    }

    #[test]
    fn buffer_is_newest_first_and_capped() {
        let mut b = ReferenceBuffer::new(3);
        for i in 0..5 {
            b.push(Tensor::scalar(i as f64));
        }
        let v: Vec<f64> = b.entries().map(|t| t.item()).collect();
        assert_eq!(v, [4.0, 3.0, 2.0]);
        b.reset();
        assert!(b.newest().is_err());
    }

    fn fusion() -> (Params, PredictionFusion) {
        let mut p = Params::default();
        let f = PredictionFusion::new(&mut ParamBuilder::new(&mut p, 3), 8);
        (p, f)
    }

    #[test]
    fn zero_branch_returns_coarse_and_attention_in_unit_interval() {
        let (mut p, f) = fusion();
        let c = noise(&[8, 6, 6], 1);
        let fine = [noise(&[8, 6, 6], 2), noise(&[8, 6, 6], 3), noise(&[8, 6, 6], 4)];
        let t = f.trace(&p, &c, &fine);
        assert!(t.channel_attention.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(t.spatial_attention.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let n = p.get(f.reduce.w).numel();
        p.set(f.reduce.w, vec![0.0; n]);
        assert_eq!(f.fuse_predictions(&p, &c, &fine).data(), c.data());
    }

    #[test]
    fn matches_step_by_step_evaluation() {
        let (p, f) = fusion();
        let (c, h, w) = (8, 5, 4);
        let hw = h * w;
        let coarse = noise(&[c, h, w], 5);
        let fine = [noise(&[c, h, w], 6), noise(&[c, h, w], 7), noise(&[c, h, w], 8)];
        let got = f.fuse_predictions(&p, &coarse, &fine);
        let cat: Vec<f64> = [&coarse, &fine[0], &fine[1], &fine[2]].iter().flat_map(|t| t.to_vec()).collect();
        let n = 4 * c;
        let v = |id| p.get(id).to_vec();
        let (w1, b1, w2, b2) = (v(f.mlp1.w), v(f.mlp1.b.unwrap()), v(f.mlp2.w), v(f.mlp2.b.unwrap()));
        let hid = b1.len();
        let mlp = |x: &[f64]| -> Vec<f64> {
            let hdn: Vec<f64> = (0..hid).map(|j| (b1[j] + (0..n).map(|i| x[i] * w1[i * hid + j]).sum::<f64>()).max(0.0)).collect();
            (0..n).map(|j| b2[j] + (0..hid).map(|i| hdn[i] * w2[i * n + j]).sum::<f64>()).collect()
        };
        let avg: Vec<f64> = (0..n).map(|k| cat[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let mx: Vec<f64> = (0..n).map(|k| cat[k * hw..(k + 1) * hw].iter().cloned().fold(f64::MIN, f64::max)).collect();
        let (ma, mm) = (mlp(&avg), mlp(&mx));
        let att: Vec<f64> = (0..n).map(|k| 1.0 / (1.0 + (-(ma[k] + mm[k])).exp())).collect();
        let (rw, rb) = (v(f.reduce.w), v(f.reduce.b.unwrap()));
        let mut red = vec![0.0; c * hw];
        for o in 0..c {
            for pos in 0..hw {
                let s: f64 = rb[o] + (0..n).map(|k| rw[o * n + k] * cat[k * hw + pos] * att[k]).sum::<f64>();
                red[o * hw + pos] = s.max(0.0);
            }
        }
        let (sw, sb) = (v(f.spatial.w), v(f.spatial.b.unwrap()));
        for pos in 0..hw {
            let (y, x) = ((pos / w) as isize, (pos % w) as isize);
            let mut s = sb[0];
            for ky in 0..7isize {
                for kx in 0..7isize {
                    let (yy, xx) = (y + ky - 3, x + kx - 3);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let q = yy as usize * w + xx as usize;
                    let mean = (0..c).map(|o| red[o * hw + q]).sum::<f64>() / c as f64;
                    let max = (0..c).map(|o| red[o * hw + q]).fold(f64::MIN, f64::max);
                    s += sw[(ky * 7 + kx) as usize] * mean + sw[49 + (ky * 7 + kx) as usize] * max;
                }
            }
            let sp = 1.0 / (1.0 + (-s).exp());
            for o in 0..c {
                let e = red[o * hw + pos] * sp + coarse.data()[o * hw + pos];
                assert!((got.data()[o * hw + pos] - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_pair_inverts() {
        let a = noise(&[4, 4, 4], 9);
        let b = noise(&[4, 4, 4], 10);
        let r = compute_residual(&a, &b).unwrap();
        let back = add_prediction(&r, &b).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(compute_residual(&a, &a).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(add_prediction(&Tensor::zeros(&[4, 4, 4]), &b).unwrap().data(), b.data());
        assert!(compute_residual(&a, &noise(&[4, 4, 2], 1)).is_err());
    }
}
