//! Quality metrics, GOP-structured sequence evaluation, RD curves and BD-rate.

mod bdrate;
mod metrics;

pub use bdrate::{bd_rate, RdCurve, RdPoint};
pub use metrics::{ms_ssim, ms_ssim_tensor, mse, psnr, psnr_from_mse, MS_SSIM_WEIGHTS, PSNR_CAP};

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bitstream::Container;
use crate::codec::{decode_sequence, encode_sequence, EntropyTables, FrameKind, IntraCodec, Model, SequenceParams};
use crate::error::{Error, Result};
use crate::frame::PixelFrame;
use crate::nn::Params;

/// One row of the per-frame log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub sequence: String,
    pub frame: usize,
    #[serde(rename = "type")]
    pub kind: char,
    pub bytes: usize,
    pub psnr: f64,
    pub msssim: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceReport {
    pub name: String,
    pub rows: Vec<FrameRow>,
    /// Whole container, header included.
    pub container_bytes: usize,
    pub width: usize,
    pub height: usize,
    pub bpp: f64,
    /// Per-frame mean.
    pub psnr: f64,
    pub msssim: f64,
    /// Mean MSE over frames, the distortion the RD loss is trained on.
    pub mse: f64,
    pub container: Container,
    pub recon: Vec<PixelFrame>,
    pub warnings: Vec<String>,
}

impl SequenceReport {
    pub fn frames(&self) -> usize {
        self.rows.len()
    }

    pub fn count(&self, kind: FrameKind) -> usize {
        let tag = kind_char(kind);
        self.rows.iter().filter(|r| r.kind == tag).count()
    }

    /// `bpp + lambda * mse`.
    pub fn rd_loss(&self, lambda: f64) -> f64 {
        self.bpp + lambda * self.mse
    }
}

fn kind_char(kind: FrameKind) -> char {
    match kind {
        FrameKind::Intra => 'I',
        FrameKind::Inter => 'P',
    }
}

/// Bits per pixel of a whole container over `frames` frames of `width`x`height`.
pub fn container_bpp(container_bytes: usize, frames: usize, width: usize, height: usize) -> f64 {
    (container_bytes * 8) as f64 / (frames * width * height) as f64
}

/// Per-frame quality of `recon` against `source`.
pub fn frame_rows(name: &str, source: &[PixelFrame], recon: &[PixelFrame], kinds: &[FrameKind], bytes: &[usize]) -> Result<Vec<FrameRow>> {
    if source.len() != recon.len() || source.len() != kinds.len() || source.len() != bytes.len() {
        return Err(Error::Shape("per-frame inputs differ in length".into()));
    }
    (0..source.len())
        .map(|i| {
            Ok(FrameRow {
                sequence: name.to_string(),
                frame: i,
                kind: kind_char(kinds[i]),
                bytes: bytes[i],
                psnr: psnr(&recon[i], &source[i])?,
                msssim: ms_ssim(&recon[i], &source[i])?,
            })
        })
        .collect()
}

pub struct EvalSetup<'a> {
    pub model: &'a Model,
    pub params: &'a Params,
    pub tables: &'a EntropyTables,
    pub sequence: SequenceParams,
    pub intra: &'a dyn IntraCodec,
    /// Frames requested per sequence.
    pub frames: usize,
    /// Decode the container and require bitwise agreement with the encoder.
    pub verify_decode: bool,
}

/// Encodes the first `setup.frames` frames of one sequence and scores the
/// reconstructions. Shorter sequences are evaluated as far as they go, with
/// a warning.
pub fn run_codec_eval(setup: &EvalSetup, name: &str, frames: &[PixelFrame]) -> Result<SequenceReport> {
    let mut warnings = Vec::new();
    if frames.len() < setup.frames {
        warnings.push(format!(
            "{name}: {} frames requested, only {} available",
            setup.frames,
            frames.len()
        ));
    }
    let frames = &frames[..frames.len().min(setup.frames)];
    let enc = encode_sequence(setup.model, setup.params, setup.tables, frames, &setup.sequence, setup.intra)?;
    if setup.verify_decode {
        let hash = setup.model.cfg.hash_with_lambda(setup.sequence.lambda);
        let parsed = Container::from_bytes(&enc.container.to_bytes())?;
        let dec = decode_sequence(setup.model, setup.params, setup.tables, &parsed, &hash, setup.sequence.gop_refs, setup.intra)?;
        if let Some(i) = (0..dec.len()).find(|&i| dec[i] != enc.recon[i]) {
            return Err(Error::Corrupt {
                frame: i,
                reason: "decoder reconstruction differs from the encoder's".into(),
            });
        }
    }
    let kinds: Vec<FrameKind> = enc.log.iter().map(|l| l.kind).collect();
    let bytes: Vec<usize> = enc.log.iter().map(|l| l.bytes).collect();
    let rows = frame_rows(name, frames, &enc.recon, &kinds, &bytes)?;
    let (w, h) = (frames[0].width(), frames[0].height());
    // I-frame bits are charged as the intra plugin reports them
    let reported_extra: i64 = enc
        .log
        .iter()
        .filter(|l| l.kind == FrameKind::Intra)
        .map(|l| l.reported_bits as i64 - 8 * l.bytes as i64)
        .sum();
    let container_bytes = enc.container.byte_len();
    let bits = (container_bytes * 8) as i64 + reported_extra;
    let bpp = bits as f64 / (frames.len() * w * h) as f64;
    let n = rows.len() as f64;
    let mse_mean = frames
        .iter()
        .zip(&enc.recon)
        .map(|(a, b)| mse(b, a))
        .sum::<Result<f64>>()?
        / n;
    Ok(SequenceReport {
        name: name.to_string(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        msssim: rows.iter().map(|r| r.msssim).sum::<f64>() / n,
        mse: mse_mean,
        rows,
        container_bytes,
        width: w,
        height: h,
        bpp,
        container: enc.container,
        recon: enc.recon,
        warnings,
    })
}

/// Evaluates several sequences on scoped threads; each sequence is coded
/// serially.
pub fn run_codec_eval_many(setup: &EvalSetup, sequences: &[(String, Vec<PixelFrame>)]) -> Result<Vec<SequenceReport>> {
    let setup_ref = &setup;
    std::thread::scope(|s| {
        let handles: Vec<_> = sequences
            .iter()
            .map(|(name, frames)| s.spawn(move || run_codec_eval(setup_ref, name, frames)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    })
}

pub fn write_frame_csv<W: Write>(out: W, rows: &[FrameRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frame_csv<R: Read>(input: R) -> Result<Vec<FrameRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// One labelled point of an RD curve file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Psnr,
    MsSsim,
}

pub fn write_curve_csv<W: Write>(out: W, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(input: R) -> Result<Vec<CurveRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub fn curve_from_rows(rows: &[CurveRow], quality: Quality) -> Result<RdCurve> {
    RdCurve::new(
        rows.iter()
            .map(|r| RdPoint {
                rate: r.bpp,
                quality: match quality {
                    Quality::Psnr => r.psnr,
                    Quality::MsSsim => r.msssim,
                },
            })
            .collect(),
    )
}

/// The curve point for one lambda: rate and quality averaged over sequences.
pub fn curve_row(lambda: f64, reports: &[SequenceReport]) -> CurveRow {
    let n = reports.len() as f64;
    CurveRow {
        lambda,
        bpp: reports.iter().map(|r| r.bpp).sum::<f64>() / n,
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        msssim: reports.iter().map(|r| r.msssim).sum::<f64>() / n,
    }
}

/// Inter-frame performance on a single clip coded as one I-frame followed
/// by P-frames. Rates are actual payload bytes over P-frame pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub lambda: f64,
    pub p_frames: usize,
    /// Whole P-records, motion included.
    pub bpp: f64,
    /// Residual and hyper streams only.
    pub bpp_resi: f64,
    pub bpp_mv: f64,
    /// Mean P-frame MSE of the decoded frames.
    pub mse: f64,
    /// Mean P-frame MSE of the prediction decoded with a zero residual.
    pub pred_mse: f64,
}

impl ClipScore {
    pub fn psnr(&self) -> f64 {
        psnr_from_mse(self.mse)
    }

    pub fn pred_psnr(&self) -> f64 {
        psnr_from_mse(self.pred_mse)
    }

    /// `bpp + lambda * mse`.
    pub fn rd_loss(&self) -> f64 {
        self.bpp + self.lambda * self.mse
    }

    /// `bpp_resi + lambda * mse`: residual rate with distortion differences
    /// converted to rate along the lambda slope.
    pub fn resi_rd(&self) -> f64 {
        self.bpp_resi + self.lambda * self.mse
    }
}

pub fn score_clip(model: &Model, params: &Params, frames: &[PixelFrame], lambda: f64) -> Result<ClipScore> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("a clip needs at least two frames".into()));
    }
    let tables = EntropyTables::freeze(model, params);
    let sp = SequenceParams {
        intra_period: frames.len(),
        gop_refs: 3,
        lambda,
    };
    let enc = encode_sequence(model, params, &tables, frames, &sp, &crate::codec::VerbatimIntra)?;
    let mut buffer = crate::mgp::ReferenceBuffer::new(3);
    let (mut bytes, mut resi, mut mv, mut d, mut dp) = (0, 0, 0, 0.0, 0.0);
    for (i, r) in enc.container.records.iter().enumerate() {
        let padded = frames[i].pad_to_multiple(crate::frame::PAD_MULTIPLE);
        if r.kind == FrameKind::Inter {
            let s = crate::codec::PayloadSections::parse(&r.payload)?;
            bytes += r.payload.len();
            resi += s.residual_total();
            mv += s.motion_total();
            d += mse(&enc.recon[i], &frames[i])?;
            let refs: Vec<_> = buffer.entries().cloned().collect();
            let pred_px = crate::tensor::no_grad(|| -> Result<PixelFrame> {
                let f = model.extract(params, &padded)?;
                let code = model.motion.encode(params, &f, &refs[0], crate::entropy::QuantMode::Eval)?;
                let (_, pred) = model.predict(params, &code.latent, &refs)?;
                PixelFrame::from_tensor_clamped(&model.prediction_pixels(params, &pred, &refs)?)
            })?;
            let pred_px = pred_px.with_original_dims(frames[i].width(), frames[i].height()).crop_to_original();
            dp += mse(&pred_px, &frames[i])?;
        } else {
            buffer.reset();
        }
        let recon_padded = enc.recon[i].pad_to_multiple(crate::frame::PAD_MULTIPLE);
        buffer.push(model.reference_feature(params, &recon_padded)?);
    }
    let n = frames.len() - 1;
    let px = (n * frames[0].width() * frames[0].height()) as f64;
    Ok(ClipScore {
        lambda,
        p_frames: n,
        bpp: 8.0 * bytes as f64 / px,
        bpp_resi: 8.0 * resi as f64 / px,
        bpp_mv: 8.0 * mv as f64 / px,
        mse: d / n as f64,
        pred_mse: dp / n as f64,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}
