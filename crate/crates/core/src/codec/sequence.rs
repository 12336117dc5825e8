use super::{EntropyTables, InterCodec, IntraCodec, Model};
use crate::bitstream::{Container, ContainerHeader, FrameRecord};
use crate::config::lambda_id;
use crate::error::{Error, Result};
use crate::frame::{PixelFrame, PAD_MULTIPLE};
use crate::mgp::{padded_indices, ReferenceBuffer};
use crate::nn::Params;
use crate::transform::FrameFeature;

pub use crate::bitstream::FrameKind;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceParams {
    pub intra_period: usize,
    /// Reference buffer capacity (1 to 3).
    pub gop_refs: usize,
    pub lambda: f64,
}

impl SequenceParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            intra_period: 32,
            gop_refs: 3,
            lambda,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.intra_period == 0 || self.intra_period > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("intra period {} out of range", self.intra_period)));
        }
        if !(1..=3).contains(&self.gop_refs) {
            return Err(Error::InvalidArgument(format!("gop refs must be 1 to 3, got {}", self.gop_refs)));
        }
        Ok(())
    }
}

/// Frame types for an `n`-frame sequence: an I-frame every `intra_period`.
pub fn gop_frame_kinds(n: usize, intra_period: usize) -> Vec<FrameKind> {
    (0..n)
        .map(|i| if i % intra_period == 0 { FrameKind::Intra } else { FrameKind::Inter })
        .collect()
}

/// What happened to one frame on the encoder side.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLog {
    pub index: usize,
    pub kind: FrameKind,
    /// Record payload size.
    pub bytes: usize,
    pub reported_bits: u64,
    /// Buffer entries available before coding this frame.
    pub refs_available: usize,
    /// Buffer slot used for each of the three fine references (inter frames).
    pub padded: Option<[usize; 3]>,
}

pub struct EncodedSequence {
    pub container: Container,
    /// Encoder-side reconstructions at original size.
    pub recon: Vec<PixelFrame>,
    pub log: Vec<FrameLog>,
}

fn refs_of(buf: &ReferenceBuffer) -> Vec<FrameFeature> {
    buf.entries().cloned().collect()
}

/// Shared bookkeeping for both directions: reconstructs I-frames from their
/// payload and keeps the reference buffer.
struct Lockstep<'a> {
    model: &'a Model,
    params: &'a Params,
    codec: InterCodec<'a>,
    buffer: ReferenceBuffer,
}

impl<'a> Lockstep<'a> {
    fn new(model: &'a Model, params: &'a Params, tables: &'a EntropyTables, refs: usize) -> Self {
        Self {
            model,
            params,
            codec: InterCodec { model, params, tables },
            buffer: ReferenceBuffer::new(refs),
        }
    }

    fn intra_decoded(&mut self, decoded: PixelFrame) -> Result<PixelFrame> {
        let padded = decoded.pad_to_multiple(PAD_MULTIPLE);
        self.buffer.reset();
        self.buffer.push(self.model.reference_feature(self.params, &padded)?);
        Ok(decoded)
    }

    fn inter_decoded(&mut self, padded: PixelFrame, orig: (usize, usize)) -> Result<PixelFrame> {
        self.buffer.push(self.model.reference_feature(self.params, &padded)?);
        Ok(padded.with_original_dims(orig.0, orig.1).crop_to_original())
    }
}

pub fn encode_sequence(
    model: &Model,
    params: &Params,
    tables: &EntropyTables,
    frames: &[PixelFrame],
    sp: &SequenceParams,
    intra: &dyn IntraCodec,
) -> Result<EncodedSequence> {
    sp.validate()?;
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames to encode".into()))?;
    let (w, h) = (first.width(), first.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("frame {w}x{h} too large for the container")));
    }
    let mut state = Lockstep::new(model, params, tables, sp.gop_refs);
    let mut records = Vec::with_capacity(frames.len());
    let mut recon = Vec::with_capacity(frames.len());
    let mut log = Vec::with_capacity(frames.len());
    for (index, (frame, kind)) in frames.iter().zip(gop_frame_kinds(frames.len(), sp.intra_period)).enumerate() {
        if frame.width() != w || frame.height() != h {
            return Err(Error::Shape(format!("frame {index} is {}x{}, expected {w}x{h}", frame.width(), frame.height())));
        }
        let refs_available = state.buffer.len();
        let (payload, out, padded) = match kind {
            FrameKind::Intra => {
                let payload = intra.encode(frame)?;
                let decoded = intra.decode(&payload, w, h)?;
                (payload, state.intra_decoded(decoded)?, None)
            }
            FrameKind::Inter => {
                let refs = refs_of(&state.buffer);
                let (payload, dec) = state.codec.encode(&frame.pad_to_multiple(PAD_MULTIPLE), &refs)?;
                let out = state.inter_decoded(dec.frame, (w, h))?;
                (payload, out, Some(padded_indices(refs.len())?))
            }
        };
        log.push(FrameLog {
            index,
            kind,
            bytes: payload.len(),
            reported_bits: match kind {
                FrameKind::Intra => intra.reported_bits(&payload),
                FrameKind::Inter => 8 * payload.len() as u64,
            },
            refs_available,
            padded,
        });
        records.push(FrameRecord { kind, payload });
        recon.push(out);
    }
    let container = Container {
        header: ContainerHeader {
            width: w as u16,
            height: h as u16,
            channels: 3,
            lambda_id: lambda_id(sp.lambda),
            intra_period: sp.intra_period as u16,
            frame_count: frames.len() as u32,
            config_hash: model.cfg.hash_with_lambda(sp.lambda),
        },
        records,
    };
    Ok(EncodedSequence { container, recon, log })
}

/// Decodes every record. `config_hash` must match the one the encoder wrote.
pub fn decode_sequence(
    model: &Model,
    params: &Params,
    tables: &EntropyTables,
    container: &Container,
    config_hash: &[u8; 32],
    gop_refs: usize,
    intra: &dyn IntraCodec,
) -> Result<Vec<PixelFrame>> {
    let h = &container.header;
    if &h.config_hash != config_hash {
        return Err(Error::ConfigMismatch("container was written with a different model or lambda".into()));
    }
    if h.channels != 3 {
        return Err(Error::InvalidArgument(format!("{} colour channels are not supported", h.channels)));
    }
    let (w, ht) = (h.width as usize, h.height as usize);
    let padded_w = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let padded_h = ht.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let mut state = Lockstep::new(model, params, tables, gop_refs);
    let mut out = Vec::with_capacity(container.records.len());
    for (frame, r) in container.records.iter().enumerate() {
        let tag = |e: Error| match e {
            Error::Corrupt { .. } => e,
            other => Error::Corrupt {
                frame,
                reason: other.to_string(),
            },
        };
        let decoded = match r.kind {
            FrameKind::Intra => {
                let d = intra.decode(&r.payload, w, ht).map_err(tag)?;
                state.intra_decoded(d).map_err(tag)?
            }
            FrameKind::Inter => {
                let refs = refs_of(&state.buffer);
                let d = state.codec.decode(&r.payload, padded_h, padded_w, &refs).map_err(tag)?;
                state.inter_decoded(d.frame, (w, ht)).map_err(tag)?
            }
        };
        out.push(decoded);
    }
    Ok(out)
}
