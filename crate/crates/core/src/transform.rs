//! Pixel <-> feature domain transforms.
//!
//! The stem maps a `[3, H, W]` frame to a `[C, H/2, W/2]` feature with a
//! stride-2 5x5 convolution followed by ResBlocks on a residual skip. The
//! reconstruction path enhances a decoded feature with non-local attention
//! over the reference features and maps it back to pixels.

use crate::error::{Error, Result};
use crate::frame::PixelFrame;
use crate::nn::{Conv2d, Init, Linear, ParamBuilder, Params, ResBlock};
use crate::tensor::{Conv2dSpec, Tensor};

/// `[C, H/2, W/2]` feature map. All prediction and residual coding happens on these.
pub type FrameFeature = Tensor;

/// Spatial reduction used inside the non-local enhancement.
pub const ENHANCE_POOL: usize = 4;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
}

impl FeatureExtractor {
    pub fn new(pb: &mut ParamBuilder, channels: usize, resblocks: usize) -> Self {
        let mut s = pb.scope("extract");
        let stem = Conv2d::new(
            &mut s,
            "stem",
            3,
            channels,
            5,
            Conv2dSpec {
                stride: 2,
                padding: 2,
                groups: 1,
            },
        );
        let blocks = (0..resblocks).map(|i| ResBlock::new(&mut s, &format!("res{i}"), channels)).collect();
        Self { stem, blocks }
    }

    /// `F = ResBlocks(F_conv) + F_conv` with `F_conv = ReLU(conv5x5(x))`.
    pub fn extract_features(&self, p: &Params, frame: &Tensor) -> Result<FrameFeature> {
        let (c, h, w) = frame.chw();
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB frame, got {c} planes")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("frame {w}x{h} must have even dimensions")));
        }
        if !frame.all_finite() {
            return Err(Error::NonFinite("input frame"));
        }
        let base = self.stem.forward(p, frame).relu();
        let mut h = base.clone();
        for b in &self.blocks {
            h = b.forward(p, &h);
        }
        if self.blocks.is_empty() {
            return Ok(base);
        }
        Ok(h.add(&base))
    }
}

/// Non-local (embedded-Gaussian) attention from the current feature to itself
/// and the reference features, computed at 1/4 resolution and added back.
#[derive(Clone, Debug)]
pub struct NonLocalEnhancer {
    pub theta: Linear,
    pub phi: Linear,
    pub g: Linear,
    pub out: Linear,
    pub inner: usize,
}

impl NonLocalEnhancer {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Self {
        let mut s = pb.scope("enhance");
        let inner = (channels / 2).max(1);
        Self {
            theta: Linear::new(&mut s, "theta", channels, inner, Init::Fan(channels)),
            phi: Linear::new(&mut s, "phi", channels, inner, Init::Fan(channels)),
            g: Linear::new(&mut s, "g", channels, inner, Init::Fan(channels)),
            // zero output projection: the block starts as the identity
            out: Linear::new(&mut s, "out", inner, channels, Init::Zeros),
            inner,
        }
    }

    pub fn enhance_reconstruction(&self, p: &Params, feature: &FrameFeature, refs: &[FrameFeature]) -> Result<FrameFeature> {
        if refs.is_empty() {
            return Err(Error::EmptyReferenceBuffer);
        }
        let (c, h, w) = feature.chw();
        for r in refs {
            if r.shape() != feature.shape() {
                return Err(Error::Shape(format!(
                    "reference feature {:?} does not match {:?}",
                    r.shape(),
                    feature.shape()
                )));
            }
        }
        if h % ENHANCE_POOL != 0 || w % ENHANCE_POOL != 0 {
            return Err(Error::Shape(format!("feature {h}x{w} not divisible by {ENHANCE_POOL}")));
        }
        let (hp, wp) = (h / ENHANCE_POOL, w / ENHANCE_POOL);
        let query = feature.avg_pool(ENHANCE_POOL).to_tokens();
        let mut sources = vec![query.clone()];
        for r in refs {
            sources.push(r.avg_pool(ENHANCE_POOL).to_tokens());
        }
        let src_refs: Vec<&Tensor> = sources.iter().collect();
        let keys = Tensor::concat(&src_refs, 0);
        let theta = self.theta.forward(p, &query);
        let phi = self.phi.forward(p, &keys);
        let g = self.g.forward(p, &keys);
        let attn = theta.matmul_t(&phi).softmax_last();
        let y = attn.matmul(&g);
        let z = self.out.forward(p, &y).from_tokens(hp, wp);
        debug_assert_eq!(z.dim(0), c);
        Ok(feature.add(&z.upsample_nearest(ENHANCE_POOL)))
    }
}

#[derive(Clone, Debug)]
pub struct Reconstructor {
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

impl Reconstructor {
    pub fn new(pb: &mut ParamBuilder, channels: usize, resblocks: usize) -> Self {
        let mut s = pb.scope("reconstruct");
        let blocks = (0..resblocks).map(|i| ResBlock::new(&mut s, &format!("res{i}"), channels)).collect();
        let head = Conv2d::same(&mut s, "head", channels, 12, 3);
        Self { blocks, head }
    }

    /// Unclamped `[3, H, W]` reconstruction of a `[C, H/2, W/2]` feature.
    pub fn reconstruct_raw(&self, p: &Params, feature: &FrameFeature) -> Tensor {
        let mut h = feature.clone();
        for b in &self.blocks {
            h = b.forward(p, &h);
        }
        self.head.forward(p, &h).pixel_shuffle(2)
    }

    /// Clamped pixel frame cropped to `(orig_w, orig_h)`.
    pub fn reconstruct_frame(&self, p: &Params, feature: &FrameFeature, orig_w: usize, orig_h: usize) -> Result<PixelFrame> {
        let raw = self.reconstruct_raw(p, feature);
        Ok(PixelFrame::from_tensor_clamped(&raw)?
            .with_original_dims(orig_w, orig_h)
            .crop_to_original())
    }
}
