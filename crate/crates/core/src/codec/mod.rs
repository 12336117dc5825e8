//! The assembled inter-frame codec.
//!
//! [`Model`] bundles every learned stage. [`Model::inter_forward`] is the
//! differentiable pass used for training; [`InterCodec`] turns the same
//! stages into bytes and back. The encoder reconstructs by decoding its own
//! payload, so both sides see identical reference features.

mod intra;
mod sequence;

pub use intra::{ExternalIntra, IntraCodec, VerbatimIntra};
pub use sequence::{decode_sequence, encode_sequence, gop_frame_kinds, EncodedSequence, FrameKind, FrameLog, SequenceParams};

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::entropy::{
    gaussian_likelihood, likelihood_bits, quantize, range_decode, range_encode, FactorizedTables, GaussianTables, QuantMode,
    QuantizedLatent,
};
use crate::error::{Error, Result};
use crate::frame::PixelFrame;
use crate::mgp::{add_prediction, compute_residual, pad_references, MultiGranularity};
use crate::nn::{Conv2d, ParamBuilder, Params};
use crate::rdt::RdtMotion;
use crate::sfd::{PriorLevel, SfdCodec};
use crate::tensor::{no_grad, Tensor};
use crate::transform::{FeatureExtractor, FrameFeature, NonLocalEnhancer, Reconstructor};

/// Every learned stage of the codec plus the training-only projection of
/// the refined prediction to pixels.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub extractor: FeatureExtractor,
    pub enhancer: NonLocalEnhancer,
    pub reconstructor: Reconstructor,
    pub motion: RdtMotion,
    pub mgp: MultiGranularity,
    pub sfd: SfdCodec,
    pub warmup_head: Conv2d,
}

impl Model {
    pub fn new(params: &mut Params, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(Error::InvalidArgument)?;
        let mut pb = ParamBuilder::new(params, seed);
        let c = cfg.channels;
        Ok(Self {
            extractor: FeatureExtractor::new(&mut pb, c, cfg.resblocks),
            enhancer: NonLocalEnhancer::new(&mut pb, c),
            reconstructor: Reconstructor::new(&mut pb, c, cfg.resblocks),
            motion: RdtMotion::new(&mut pb, &cfg),
            mgp: MultiGranularity::new(&mut pb, &cfg),
            sfd: SfdCodec::new(&mut pb, &cfg),
            warmup_head: Conv2d::same(&mut pb.scope("warmup"), "project", c, 12, 3),
            cfg,
        })
    }

    pub fn extract(&self, p: &Params, frame: &PixelFrame) -> Result<FrameFeature> {
        self.extractor.extract_features(p, &frame.to_tensor())
    }

    /// Feature that enters the reference buffer for a decoded frame.
    pub fn reference_feature(&self, p: &Params, decoded: &PixelFrame) -> Result<FrameFeature> {
        no_grad(|| self.extract(p, &decoded.quantize_8bit()))
    }

    /// Coarse prediction from the coded motion, refined against the padded
    /// buffer when multi-reference refinement is enabled.
    pub fn predict(&self, p: &Params, q_mv: &Tensor, refs: &[FrameFeature]) -> Result<(FrameFeature, FrameFeature)> {
        let newest = refs.first().ok_or(Error::EmptyReferenceBuffer)?;
        let coarse = self.motion.predict(p, q_mv, newest)?;
        if !self.cfg.ablation.mgp {
            return Ok((coarse.clone(), coarse));
        }
        let set = self.mgp.refine(p, coarse, &pad_references(refs)?)?;
        Ok((set.coarse, set.fused))
    }

    /// Decoded residual plus prediction, enhanced and mapped back to pixels (unclamped).
    fn reconstruct(
        &self,
        p: &Params,
        pred: &FrameFeature,
        prior: Option<&[PriorLevel]>,
        y_hat: &Tensor,
        refs: &[FrameFeature],
    ) -> Result<(FrameFeature, Tensor)> {
        let resi_hat = self.sfd.decode_with_prior(p, y_hat, prior)?;
        let f_tilde = add_prediction(&resi_hat, pred)?;
        let f_hat = self.enhancer.enhance_reconstruction(p, &f_tilde, refs)?;
        let x = self.reconstructor.reconstruct_raw(p, &f_hat);
        Ok((resi_hat, x))
    }

    /// Pixels decoded from `pred` with a zero residual (unclamped).
    pub fn prediction_pixels(&self, p: &Params, pred: &FrameFeature, refs: &[FrameFeature]) -> Result<Tensor> {
        let f_hat = self.enhancer.enhance_reconstruction(p, pred, refs)?;
        Ok(self.reconstructor.reconstruct_raw(p, &f_hat))
    }

    /// Full inter pass. `rng` selects training (noisy quantization) over
    /// evaluation (rounding); bit counts are model estimates.
    pub fn inter_forward(&self, p: &Params, frame: &Tensor, refs: &[FrameFeature], mut rng: Option<&mut ChaCha8Rng>) -> Result<InterPass> {
        let f_cur = self.extractor.extract_features(p, frame)?;
        let newest = refs.first().ok_or(Error::EmptyReferenceBuffer)?;
        let code = self.motion.encode(p, &f_cur, newest, mode(&mut rng))?;
        let (coarse, pred) = self.predict(p, &code.latent, refs)?;
        let resi = compute_residual(&f_cur, &pred)?;
        let prior = self.sfd.build_prior(p, &pred)?;
        let y = self.sfd.encode_with_prior(p, &resi, prior.as_deref())?;
        let hyper = &self.sfd.hyper;
        let z_hat = quantize(&hyper.analyze(p, &y), mode(&mut rng));
        let z_bits = likelihood_bits(&hyper.z_prior.likelihood(p, &z_hat));
        let (mu, sigma) = hyper.synthesize(p, &z_hat, y.dim(1), y.dim(2));
        let y_hat = quantize(&y.sub(&mu), mode(&mut rng)).add(&mu);
        let y_bits = likelihood_bits(&gaussian_likelihood(&y_hat, &mu, &sigma));
        let (resi_hat, x_hat) = self.reconstruct(p, &pred, prior.as_deref(), &y_hat, refs)?;
        Ok(InterPass {
            coarse,
            pred,
            resi,
            resi_hat,
            x_hat,
            mv_bits: code.bits,
            z_bits,
            y_bits,
        })
    }
}

fn mode<'a>(rng: &'a mut Option<&mut ChaCha8Rng>) -> QuantMode<'a> {
    match rng.as_deref_mut() {
        Some(r) => QuantMode::Train(r),
        None => QuantMode::Eval,
    }
}

/// Intermediate tensors of one inter-coded frame.
pub struct InterPass {
    pub coarse: FrameFeature,
    /// Refined prediction (`F_m-pre`); equal to `coarse` without refinement.
    pub pred: FrameFeature,
    pub resi: FrameFeature,
    pub resi_hat: FrameFeature,
    /// Unclamped `[3, H, W]` reconstruction.
    pub x_hat: Tensor,
    pub mv_bits: Tensor,
    pub z_bits: Tensor,
    pub y_bits: Tensor,
}

impl InterPass {
    /// Residual stream bits: hyper side information plus the latent itself.
    pub fn residual_bits(&self) -> Tensor {
        self.z_bits.add(&self.y_bits)
    }
}

/// Frozen integer tables of the two factorized densities.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTables {
    pub motion: FactorizedTables,
    pub hyper: FactorizedTables,
}

impl EntropyTables {
    pub fn freeze(model: &Model, p: &Params) -> Self {
        Self {
            motion: model.motion.codec.prior.tables(p),
            hyper: model.sfd.hyper.z_prior.tables(p),
        }
    }
}

/// Latent shapes of one inter frame, derived from the padded frame size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentDims {
    /// Motion code `[M, H/8, W/8]`.
    pub motion: [usize; 3],
    /// Residual latent `[C_r, H/32, W/32]`.
    pub residual: [usize; 3],
    /// Hyper latent `[C_z, ceil(H/128), ceil(W/128)]`.
    pub hyper: [usize; 3],
}

impl LatentDims {
    pub fn new(cfg: &ModelConfig, height: usize, width: usize) -> Result<Self> {
        if height % 32 != 0 || width % 32 != 0 {
            return Err(Error::Shape(format!("padded frame {width}x{height} must be divisible by 32")));
        }
        let (rh, rw) = (height / 32, width / 32);
        Ok(Self {
            motion: [cfg.motion_code, height / 8, width / 8],
            residual: [cfg.residual_latent, rh, rw],
            hyper: [cfg.hyper_channels, rh.div_ceil(4), rw.div_ceil(4)],
        })
    }
}

fn plane(shape: &[usize; 3]) -> usize {
    shape[1] * shape[2]
}

fn numel(shape: &[usize; 3]) -> usize {
    shape.iter().product()
}

fn put_chunk(out: &mut Vec<u8>, chunk: &[u8]) {
    out.extend((chunk.len() as u32).to_le_bytes());
    out.extend_from_slice(chunk);
}

fn take_chunk<'a>(buf: &mut &'a [u8], what: &str) -> Result<&'a [u8]> {
    if buf.len() < 4 {
        return Err(Error::Truncated(format!("{what} length prefix")));
    }
    let n = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    let rest = &buf[4..];
    if rest.len() < n {
        return Err(Error::Truncated(format!("{what} needs {n} bytes, {} left", rest.len())));
    }
    let (chunk, tail) = rest.split_at(n);
    *buf = tail;
    Ok(chunk)
}

/// Sizes of the three length-prefixed streams of an inter payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PayloadSections {
    pub hyper: usize,
    pub residual: usize,
    pub motion: usize,
}

impl PayloadSections {
    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut buf = payload;
        let hyper = take_chunk(&mut buf, "hyper stream")?.len();
        let residual = take_chunk(&mut buf, "residual stream")?.len();
        let motion = take_chunk(&mut buf, "motion stream")?.len();
        if !buf.is_empty() {
            return Err(Error::Truncated(format!("{} trailing bytes after the motion stream", buf.len())));
        }
        Ok(Self { hyper, residual, motion })
    }

    /// Bytes spent on the residual, side information and prefixes included.
    pub fn residual_total(&self) -> usize {
        self.hyper + self.residual + 8
    }

    pub fn motion_total(&self) -> usize {
        self.motion + 4
    }
}

/// Byte-level inter coding with a fixed set of parameters and tables.
pub struct InterCodec<'a> {
    pub model: &'a Model,
    pub params: &'a Params,
    pub tables: &'a EntropyTables,
}

/// Decoder output for one inter frame.
pub struct InterDecoded {
    /// Clamped, padded reconstruction.
    pub frame: PixelFrame,
}

impl InterCodec<'_> {
    /// Codes `frame` (padded) against `refs` (newest first). Returns the
    /// payload and the reconstruction the decoder will produce from it.
    pub fn encode(&self, frame: &PixelFrame, refs: &[FrameFeature]) -> Result<(Vec<u8>, InterDecoded)> {
        let (m, p) = (self.model, self.params);
        let dims = LatentDims::new(&m.cfg, frame.height(), frame.width())?;
        let payload = no_grad(|| -> Result<Vec<u8>> {
            let f_cur = m.extract(p, frame)?;
            let newest = refs.first().ok_or(Error::EmptyReferenceBuffer)?;
            let code = m.motion.encode(p, &f_cur, newest, QuantMode::Eval)?;
            let (_, pred) = m.predict(p, &code.latent, refs)?;
            let prior = m.sfd.build_prior(p, &pred)?;
            let y = m.sfd.encode_with_prior(p, &compute_residual(&f_cur, &pred)?, prior.as_deref())?;
            let hyper = &m.sfd.hyper;
            let z = QuantizedLatent::from_tensor(&hyper.analyze(p, &y));
            let (mu, sigma) = hyper.synthesize(p, &z.to_tensor(), y.dim(1), y.dim(2));
            let y_sym = QuantizedLatent::from_tensor(&y.sub(&mu));
            let mv = QuantizedLatent::from_tensor(&code.latent);
            let zeros = vec![0.0; y_sym.len()];
            let mut out = Vec::new();
            put_chunk(&mut out, &range_encode(&z.values, &self.tables.hyper.bind(plane(&dims.hyper))));
            put_chunk(&mut out, &range_encode(&y_sym.values, &GaussianTables::new(zeros, sigma.to_vec())));
            put_chunk(&mut out, &range_encode(&mv.values, &self.tables.motion.bind(plane(&dims.motion))));
            Ok(out)
        })?;
        let decoded = self.decode(&payload, frame.height(), frame.width(), refs)?;
        Ok((payload, decoded))
    }

    pub fn decode(&self, payload: &[u8], height: usize, width: usize, refs: &[FrameFeature]) -> Result<InterDecoded> {
        let (m, p) = (self.model, self.params);
        let dims = LatentDims::new(&m.cfg, height, width)?;
        let mut buf = payload;
        let hyper_bytes = take_chunk(&mut buf, "hyper stream")?;
        let resi_bytes = take_chunk(&mut buf, "residual stream")?;
        let mv_bytes = take_chunk(&mut buf, "motion stream")?;
        if !buf.is_empty() {
            return Err(Error::Truncated(format!("{} trailing bytes after the motion stream", buf.len())));
        }
        no_grad(|| {
            let mv = range_decode(mv_bytes, &self.tables.motion.bind(plane(&dims.motion)), numel(&dims.motion))?;
            let q_mv = QuantizedLatent {
                shape: dims.motion.to_vec(),
                values: mv,
            }
            .to_tensor();
            let (_, pred) = m.predict(p, &q_mv, refs)?;
            let prior = m.sfd.build_prior(p, &pred)?;
            let z = range_decode(hyper_bytes, &self.tables.hyper.bind(plane(&dims.hyper)), numel(&dims.hyper))?;
            let z_hat = QuantizedLatent {
                shape: dims.hyper.to_vec(),
                values: z,
            }
            .to_tensor();
            let [_, rh, rw] = dims.residual;
            let (mu, sigma) = m.sfd.hyper.synthesize(p, &z_hat, rh, rw);
            let n = numel(&dims.residual);
            let y = range_decode(resi_bytes, &GaussianTables::new(vec![0.0; n], sigma.to_vec()), n)?;
            let y_hat = QuantizedLatent {
                shape: dims.residual.to_vec(),
                values: y,
            }
            .to_tensor()
            .add(&mu);
            let (_, x) = m.reconstruct(p, &pred, prior.as_deref(), &y_hat, refs)?;
            Ok(InterDecoded {
                frame: PixelFrame::from_tensor_clamped(&x)?.quantize_8bit(),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;

    pub(crate) fn toy() -> (Params, Model) {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 11).unwrap();
        (p, m)
    }

    fn frame(seed: u64) -> PixelFrame {
        crate::data::moving_texture(64, 64, 2, seed).remove(1)
    }

    #[test]
    fn latent_dims_for_64_and_128() {
        let d = LatentDims::new(&ModelConfig::toy(), 64, 128).unwrap();
        assert_eq!(d.motion, [16, 8, 16]);
        assert_eq!(d.residual, [32, 2, 4]);
        assert_eq!(d.hyper, [16, 1, 1]);
        assert!(LatentDims::new(&ModelConfig::toy(), 48, 64).is_err());
    }

    #[test]
    fn inter_forward_shapes_and_positive_bits() {
        let (p, m) = toy();
        let x = frame(1);
        let r = m.extract(&p, &x).unwrap();
        let pass = no_grad(|| m.inter_forward(&p, &x.to_tensor(), &[r], None).unwrap());
        assert_eq!(pass.x_hat.shape(), [3, 64, 64]);
        assert_eq!(pass.pred.shape(), [32, 32, 32]);
        assert!(pass.mv_bits.item() > 0.0 && pass.y_bits.item() > 0.0 && pass.z_bits.item() > 0.0);
    }

    #[test]
    fn training_pass_reaches_every_coded_stage() {
        let (p, m) = toy();
        let x = frame(2);
        let r = m.extract(&p, &x).unwrap().detach();
        let mut rng = stream_rng(0, "test");
        let pass = m.inter_forward(&p, &x.to_tensor(), &[r], Some(&mut rng)).unwrap();
        let loss = pass.mv_bits.add(&pass.residual_bits()).add(&pass.x_hat.square().mean_all());
        let g = loss.backward();
        for name in ["motion.codec.enc0.weight", "sfd.embed.weight", "sfd.hyper.ha0.weight", "reconstruct.head.weight", "extract.stem.weight"] {
            let id = p.lookup(name).unwrap_or_else(|| panic!("{name}"));
            assert!(g.get_or_zeros(p.get(id)).iter().any(|v| *v != 0.0), "{name}");
        }
    }

    #[test]
    fn payload_decodes_to_encoder_reconstruction() {
        let (p, m) = toy();
        let tables = EntropyTables::freeze(&m, &p);
        let codec = InterCodec {
            model: &m,
            params: &p,
            tables: &tables,
        };
        let refs = [m.reference_feature(&p, &frame(3)).unwrap()];
        let x = frame(4);
        let (payload, enc) = codec.encode(&x, &refs).unwrap();
        let dec = codec.decode(&payload, 64, 64, &refs).unwrap();
        assert_eq!(enc.frame, dec.frame);
        let s = PayloadSections::parse(&payload).unwrap();
        assert_eq!(s.residual_total() + s.motion_total(), payload.len());
        assert!(PayloadSections::parse(&payload[..5]).is_err());
        assert!(codec.decode(&payload[..payload.len() - 1], 64, 64, &refs).is_err());
        let mut longer = payload.clone();
        longer.push(0);
        assert!(codec.decode(&longer, 64, 64, &refs).is_err());
    }

    #[test]
    fn coded_size_tracks_the_estimate() {
        let (p, m) = toy();
        let tables = EntropyTables::freeze(&m, &p);
        let codec = InterCodec {
            model: &m,
            params: &p,
            tables: &tables,
        };
        let refs = [m.reference_feature(&p, &frame(5)).unwrap()];
        let x = frame(6);
        let (payload, _) = codec.encode(&x, &refs).unwrap();
        let pass = no_grad(|| m.inter_forward(&p, &x.to_tensor(), &refs, None).unwrap());
        let est = pass.mv_bits.item() + pass.residual_bits().item();
        // three headers and prefixes plus range coder flush bytes
        let actual = 8.0 * payload.len() as f64;
        assert!(actual <= est * 1.02 + 8.0 * 64.0, "{actual} vs {est}");
    }
}
