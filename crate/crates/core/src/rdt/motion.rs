use super::{motion_head, Compensator, MotionEstimator, MotionField};
use crate::config::{MaskMode, ModelConfig};
use crate::entropy::{likelihood_bits, quantize, FactorizedPrior, QuantMode};
use crate::error::Result;
use crate::nn::{Conv2d, ParamBuilder, Params};
use crate::tensor::{Conv2dSpec, Tensor};
use crate::transform::FrameFeature;

const DOWN: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
    groups: 1,
};

/// Quantized motion latent and its estimated cost.
pub struct MotionCode {
    /// Rounded (eval) or noisy (train) latent.
    pub latent: Tensor,
    /// `-sum log2 p`; differentiable in train mode.
    pub bits: Tensor,
}

/// Two-stage convolutional autoencoder for the motion latent with a
/// factorized entropy model.
#[derive(Clone, Debug)]
pub struct MotionCodec {
    enc: [Conv2d; 2],
    dec: [Conv2d; 2],
    pub head: Conv2d,
    pub prior: FactorizedPrior,
    groups: usize,
    mask_mode: MaskMode,
}

impl MotionCodec {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("codec");
        let (cm, m) = (cfg.motion_latent, cfg.motion_code);
        Self {
            enc: [
                Conv2d::new(&mut s, "enc0", cm, m, 3, DOWN),
                Conv2d::new(&mut s, "enc1", m, m, 3, DOWN),
            ],
            dec: [
                Conv2d::same(&mut s, "dec0", m, 4 * m, 3),
                Conv2d::same(&mut s, "dec1", m, 4 * m, 3),
            ],
            head: motion_head(&mut s, "head", m, cfg.groups(), cfg.mask_mode),
            prior: FactorizedPrior::new(&mut s, "prior", m, cfg.mixture_components),
            groups: cfg.groups(),
            mask_mode: cfg.mask_mode,
        }
    }

    /// `[C_m, H, W] -> [M, H/4, W/4]`
    pub fn analyze(&self, p: &Params, latent: &Tensor) -> Tensor {
        let h = self.enc[0].forward(p, latent).relu();
        self.enc[1].forward(p, &h)
    }

    pub fn motion_encode(&self, p: &Params, latent: &Tensor, mode: QuantMode<'_>) -> MotionCode {
        let y = self.analyze(p, latent);
        let q = quantize(&y, mode);
        let bits = likelihood_bits(&self.prior.likelihood(p, &q));
        MotionCode { latent: q, bits }
    }

    pub fn motion_decode(&self, p: &Params, q: &Tensor) -> MotionField {
        let mut h = q.clone();
        for d in &self.dec {
            h = d.forward(p, &h).pixel_shuffle(2).relu();
        }
        MotionField::from_head(&self.head.forward(p, &h), self.groups, self.mask_mode)
    }
}

/// The coded motion path: estimate, code, decode, compensate.
#[derive(Clone, Debug)]
pub struct RdtMotion {
    pub estimator: MotionEstimator,
    pub codec: MotionCodec,
    pub compensator: Compensator,
}

impl RdtMotion {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("motion");
        Self {
            estimator: MotionEstimator::new(&mut s, cfg),
            codec: MotionCodec::new(&mut s, cfg),
            compensator: Compensator::new(&mut s, cfg.channels, cfg.groups()),
        }
    }

    /// Encoder side: current + newest reference to a quantized motion code.
    pub fn encode(&self, p: &Params, cur: &FrameFeature, reference: &FrameFeature, mode: QuantMode<'_>) -> Result<MotionCode> {
        let latent = self.estimator.estimate(p, cur, reference)?;
        Ok(self.codec.motion_encode(p, &latent, mode))
    }

    /// Shared by encoder and decoder: quantized code + reference to the coarse prediction.
    pub fn predict(&self, p: &Params, q: &Tensor, reference: &FrameFeature) -> Result<FrameFeature> {
        let mv = self.codec.motion_decode(p, q);
        self.compensator.deformable_compensate(p, reference, &mv)
    }
}
