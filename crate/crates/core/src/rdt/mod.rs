//! Transformer motion estimation and deformable compensation.
//!
//! A fused current/reference feature goes through a U-shaped window
//! transformer; its output is either coded (the bit-spending motion path) or
//! mapped straight to offsets (the bit-free alignment used for refinement).
//! Either way the offsets and per-tap mask drive a deformable convolution
//! whose per-tap weights are learned independently.

mod lewin;
mod motion;
mod uformer;

pub use lewin::LeWinBlock;
pub use motion::{MotionCode, MotionCodec, RdtMotion};
pub use uformer::Uformer;

use crate::config::{MaskMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamBuilder, ParamId, Params};
use crate::tensor::{deform_conv2d, Conv2dSpec, Tensor, TAPS};
use crate::transform::FrameFeature;

/// Decoded motion: `offsets: [G*9*2, H, W]` in feature-grid pixels as
/// `(dy, dx)` pairs, `mask: [G*9, H, W]`.
#[derive(Clone, Debug)]
pub struct MotionField {
    pub offsets: Tensor,
    pub mask: Tensor,
}

impl MotionField {
    /// Splits a raw head output `[G*27, H, W]` into offsets and a normalized mask.
    pub fn from_head(raw: &Tensor, groups: usize, mode: MaskMode) -> Self {
        let off = groups * TAPS * 2;
        Self {
            offsets: raw.narrow(0, 0, off),
            mask: normalize_mask(&raw.narrow(0, off, groups * TAPS), groups, mode),
        }
    }
}

pub fn normalize_mask(logits: &Tensor, groups: usize, mode: MaskMode) -> Tensor {
    match mode {
        MaskMode::Sigmoid => logits.sigmoid(),
        MaskMode::Softmax => {
            let (_, h, w) = logits.chw();
            logits
                .reshape(&[groups, TAPS, h * w])
                .permute(&[0, 2, 1])
                .softmax_last()
                .permute(&[0, 2, 1])
                .reshape(&[groups * TAPS, h, w])
        }
    }
}

/// Softmax weight the centre tap starts with.
const CENTRE_SHARE: f64 = 0.9;

/// Zero-weight 1x1 head emitting `[G*27, H, W]` (offsets, then mask logits).
/// The bias starts at zero motion with the mask concentrated on the centre
/// tap, so a fresh head reproduces the reference almost exactly.
pub fn motion_head(pb: &mut ParamBuilder, name: &str, in_ch: usize, groups: usize, mode: MaskMode) -> Conv2d {
    let mut s = pb.scope(name);
    let out_ch = groups * TAPS * 3;
    let (centre, other) = match mode {
        MaskMode::Softmax => ((CENTRE_SHARE / (1.0 - CENTRE_SHARE) * (TAPS - 1) as f64).ln(), 0.0),
        MaskMode::Sigmoid => (6.0, -6.0),
    };
    let mut bias = vec![0.0; out_ch];
    for g in 0..groups {
        for k in 0..TAPS {
            bias[groups * TAPS * 2 + g * TAPS + k] = if k == TAPS / 2 { centre } else { other };
        }
    }
    Conv2d {
        w: s.tensor("weight", &[out_ch, in_ch, 1, 1], Init::Zeros),
        b: Some(s.with_values("bias", &[out_ch], bias)),
        spec: Conv2dSpec::default(),
        in_ch,
        out_ch,
        kernel: 1,
    }
}

/// 1x1 convolution over the channel concatenation of two features.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub conv: Conv2d,
}

impl Fuse {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        Self {
            conv: Conv2d::same(pb, "fuse", 2 * channels, channels, 1),
        }
    }

    pub fn fuse_frame_pair(&self, p: &Params, cur: &FrameFeature, reference: &FrameFeature) -> Result<Tensor> {
        if cur.shape() != reference.shape() {
            return Err(Error::Shape(format!(
                "cannot fuse {:?} with {:?}",
                cur.shape(),
                reference.shape()
            )));
        }
        Ok(self.conv.forward(p, &Tensor::concat(&[cur, reference], 0)))
    }
}

/// Plain convolutional estimator used when the transformer is ablated.
#[derive(Clone, Debug)]
pub struct ConvEstimator {
    convs: [Conv2d; 3],
}

impl ConvEstimator {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, width: usize) -> Self {
        let mut s = pb.scope("convnet");
        Self {
            convs: [
                Conv2d::same(&mut s, "c0", in_ch, width, 3),
                Conv2d::same(&mut s, "c1", width, width, 3),
                Conv2d::same(&mut s, "c2", width, out_ch, 3),
            ],
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        let h = self.convs[0].forward(p, x).relu();
        let h = self.convs[1].forward(p, &h).relu();
        self.convs[2].forward(p, &h)
    }
}

#[derive(Clone, Debug)]
pub enum Estimator {
    Transformer(Uformer),
    Conv(ConvEstimator),
}

/// Fusion followed by the motion-latent estimator.
#[derive(Clone, Debug)]
pub struct MotionEstimator {
    pub fuse: Fuse,
    pub net: Estimator,
}

impl MotionEstimator {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let fuse = Fuse::new(pb, cfg.channels);
        let net = if cfg.ablation.rdt {
            Estimator::Transformer(Uformer::new(
                pb,
                cfg.channels,
                cfg.motion_latent,
                cfg.uformer_dim,
                cfg.uformer_depth,
                cfg.heads,
                cfg.window,
                cfg.ffn_ratio,
            ))
        } else {
            Estimator::Conv(ConvEstimator::new(pb, cfg.channels, cfg.motion_latent, 2 * cfg.uformer_dim))
        };
        Self { fuse, net }
    }

    pub fn estimate(&self, p: &Params, cur: &FrameFeature, reference: &FrameFeature) -> Result<Tensor> {
        let fused = self.fuse.fuse_frame_pair(p, cur, reference)?;
        Ok(match &self.net {
            Estimator::Transformer(u) => u.uformer_estimate(p, &fused),
            Estimator::Conv(c) => c.forward(p, &fused),
        })
    }
}

/// Modulated deformable convolution with independent (non-shared) tap weights.
#[derive(Clone, Debug)]
pub struct Compensator {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl Compensator {
    /// Starts as the per-channel identity on every tap: the output is then the
    /// mask-weighted average of the sampled neighbourhood.
    pub fn new(pb: &mut ParamBuilder, channels: usize, groups: usize) -> Self {
        let mut s = pb.scope("compensate");
        let mut w = vec![0.0; channels * channels * TAPS];
        for o in 0..channels {
            for k in 0..TAPS {
                w[(o * channels + o) * TAPS + k] = 1.0;
            }
        }
        Self {
            weight: s.with_values("weight", &[channels, channels * TAPS], w),
            bias: s.tensor("bias", &[channels], Init::Zeros),
            groups,
        }
    }

    pub fn deformable_compensate(&self, p: &Params, reference: &FrameFeature, mv: &MotionField) -> Result<FrameFeature> {
        if !mv.offsets.all_finite() {
            return Err(Error::NonFinite("motion offsets"));
        }
        if !mv.mask.all_finite() {
            return Err(Error::NonFinite("motion mask"));
        }
        let (_, h, w) = reference.chw();
        if mv.offsets.shape() != [self.groups * TAPS * 2, h, w] || mv.mask.shape() != [self.groups * TAPS, h, w] {
            return Err(Error::Shape(format!(
                "motion field {:?}/{:?} does not fit reference {:?}",
                mv.offsets.shape(),
                mv.mask.shape(),
                reference.shape()
            )));
        }
        Ok(deform_conv2d(
            reference,
            &mv.offsets,
            &mv.mask,
            p.get(self.weight),
            Some(p.get(self.bias)),
            self.groups,
        ))
    }
}

/// Bit-free alignment of a reference feature to the coarse prediction: the
/// same fuse/estimate/compensate chain as the coded path, with offsets
/// emitted directly from the motion latent.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub estimator: MotionEstimator,
    pub head: Conv2d,
    pub compensator: Compensator,
    pub mask_mode: MaskMode,
}

impl Aligner {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("align");
        let g = cfg.groups();
        Self {
            estimator: MotionEstimator::new(&mut s, cfg),
            head: motion_head(&mut s, "head", cfg.motion_latent, g, cfg.mask_mode),
            compensator: Compensator::new(&mut s, cfg.channels, g),
            mask_mode: cfg.mask_mode,
        }
    }

    pub fn motion(&self, p: &Params, coarse: &FrameFeature, reference: &FrameFeature) -> Result<MotionField> {
        let latent = self.estimator.estimate(p, coarse, reference)?;
        Ok(MotionField::from_head(
            &self.head.forward(p, &latent),
            self.compensator.groups,
            self.mask_mode,
        ))
    }

    pub fn align_to_coarse(&self, p: &Params, coarse: &FrameFeature, reference: &FrameFeature) -> Result<FrameFeature> {
        let mv = self.motion(p, coarse, reference)?;
        self.compensator.deformable_compensate(p, reference, &mv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::rel_err;
    use crate::tensor::no_grad;
    use rand::Rng;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::nn::stream_rng(seed, "rdt");
        Tensor::new((0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn fuse_identity_and_direct_projection() {
        let mut p = Params::default();
        let f = Fuse::new(&mut ParamBuilder::new(&mut p, 0), 4);
        let (a, b) = (noise(&[4, 3, 5], 1), noise(&[4, 3, 5], 2));
        let mut w = vec![0.0; 4 * 8];
        for o in 0..4 {
            w[o * 8 + o] = 1.0;
        }
        let saved = p.get(f.conv.w).to_vec();
        p.set(f.conv.w, w);
        assert_eq!(f.fuse_frame_pair(&p, &a, &b).unwrap().data(), a.data());
        p.set(f.conv.w, saved.clone());
        p.set(f.conv.b.unwrap(), vec![0.1, -0.2, 0.3, 0.0]);
        let y = f.fuse_frame_pair(&p, &a, &b).unwrap();
        for o in 0..4 {
            for pos in 0..15 {
                let mut e = p.get(f.conv.b.unwrap()).data()[o];
                for c in 0..8 {
                    let v = if c < 4 { a.data()[c * 15 + pos] } else { b.data()[(c - 4) * 15 + pos] };
                    e += saved[o * 8 + c] * v;
                }
                assert!((y.data()[o * 15 + pos] - e).abs() < 1e-12);
            }
        }
        assert!(f.fuse_frame_pair(&p, &a, &noise(&[4, 3, 4], 3)).is_err());
    }

    #[test]
    fn fused_score_expands_into_four_cross_terms() {
        // <F(p), F(q)> with F = f_a(cur) + f_b(ref) splits into four products
        let mut p = Params::default();
        let f = Fuse::new(&mut ParamBuilder::new(&mut p, 9), 4);
        p.set(f.conv.b.unwrap(), vec![0.0; 4]);
        let (cur, reference) = (noise(&[4, 4, 4], 4), noise(&[4, 4, 4], 5));
        let fused = f.fuse_frame_pair(&p, &cur, &reference).unwrap();
        let w = p.get(f.conv.w).to_vec();
        let half = |x: &Tensor, off: usize, pos: usize| -> Vec<f64> {
            (0..4).map(|o| (0..4).map(|c| w[o * 8 + off + c] * x.data()[c * 16 + pos]).sum()).collect()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (pa, pb) in [(0, 5), (3, 3), (7, 12)] {
            let fa: Vec<f64> = (0..4).map(|c| fused.data()[c * 16 + pa]).collect();
            let fb: Vec<f64> = (0..4).map(|c| fused.data()[c * 16 + pb]).collect();
            let terms = dot(&half(&cur, 0, pa), &half(&cur, 0, pb))
                + dot(&half(&cur, 0, pa), &half(&reference, 4, pb))
                + dot(&half(&reference, 4, pa), &half(&cur, 0, pb))
                + dot(&half(&reference, 4, pa), &half(&reference, 4, pb));
            assert!((dot(&fa, &fb) - terms).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_logits_give_uniform_mask() {
        let m = normalize_mask(&Tensor::full(&[18, 3, 3], 0.7), 2, MaskMode::Softmax);
        assert!(m.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        let m = normalize_mask(&noise(&[18, 3, 3], 7).mul_scalar(5.0), 2, MaskMode::Softmax);
        for g in 0..2 {
            for pos in 0..9 {
                let s: f64 = (0..9).map(|k| m.data()[(g * 9 + k) * 9 + pos]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_offsets_rejected() {
        let mut p = Params::default();
        let c = Compensator::new(&mut ParamBuilder::new(&mut p, 0), 4, 2);
        let mut off = vec![0.0; 36 * 4];
        off[3] = f64::NAN;
        let mv = MotionField {
            offsets: Tensor::new(off, &[36, 2, 2]),
            mask: Tensor::full(&[18, 2, 2], 1.0 / 9.0),
        };
        assert!(c.deformable_compensate(&p, &Tensor::zeros(&[4, 2, 2]), &mv).is_err());
    }

    #[test]
    fn fresh_aligner_is_identity_on_constant_input() {
        let cfg = ModelConfig::toy();
        let mut p = Params::default();
        let a = Aligner::new(&mut ParamBuilder::new(&mut p, 1), &cfg);
        let x = Tensor::full(&[cfg.channels, 16, 16], 0.4);
        let y = no_grad(|| a.align_to_coarse(&p, &x, &x).unwrap());
        for (g, e) in y.data().iter().zip(x.data()) {
            assert!(rel_err(*g, *e, 1e-9) < 1e-12);
        }
        let x = noise(&[cfg.channels, 16, 16], 11);
        let y = no_grad(|| a.align_to_coarse(&p, &x, &x).unwrap());
        let diff = y.sub(&x).abs().mean_all().item();
        assert!(diff < 0.1 * x.abs().mean_all().item() + 0.05, "{diff}");
    }

    #[test]
    fn aligner_equals_explicit_composition() {
        let cfg = ModelConfig::toy();
        let mut p = Params::default();
        let a = Aligner::new(&mut ParamBuilder::new(&mut p, 2), &cfg);
        let head_w = p.get(a.head.w).numel();
        p.set(a.head.w, noise(&[head_w], 8).mul_scalar(0.05).to_vec());
        let (c, r) = (noise(&[32, 16, 16], 9), noise(&[32, 16, 16], 10));
        let y = no_grad(|| a.align_to_coarse(&p, &c, &r).unwrap());
        let fused = a.estimator.fuse.fuse_frame_pair(&p, &c, &r).unwrap();
        let Estimator::Transformer(u) = &a.estimator.net else { panic!() };
        let raw = a.head.forward(&p, &u.uformer_estimate(&p, &fused));
        let g = cfg.groups();
        let mv = MotionField {
            offsets: raw.narrow(0, 0, g * 18),
            mask: normalize_mask(&raw.narrow(0, g * 18, g * 9), g, MaskMode::Softmax),
        };
        let direct = a.compensator.deformable_compensate(&p, &r, &mv).unwrap();
        assert_eq!(y.data(), direct.data());
    }
}
