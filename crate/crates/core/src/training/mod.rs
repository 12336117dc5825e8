//! Rate-distortion training.
//!
//! Each optimizer step codes one inter frame per clip in the batch:
//! `L = bpp_mv + bpp_resi + lambda * d(x_hat, x)`, plus
//! `lambda * d(x_mpre, x)` while warm-up is active, where `x_mpre` is a
//! single convolution of the refined prediction. Clips are coded in order
//! with the decoded features of earlier frames as references; the first
//! frame's reference is its ground-truth feature.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Model;
use crate::error::{Error, Result};
use crate::eval::ms_ssim_tensor;
use crate::frame::PixelFrame;
use crate::mgp::ReferenceBuffer;
use crate::nn::{stream_rng, ParamId, Params};
use crate::tensor::{no_grad, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distortion {
    Mse,
    /// `1 - MS-SSIM`.
    MsSsim,
}

impl Distortion {
    pub fn measure(&self, x_hat: &Tensor, x: &Tensor) -> Tensor {
        match self {
            Distortion::Mse => x_hat.sub(x).square().mean_all(),
            Distortion::MsSsim => ms_ssim_tensor(&x_hat.clamp(0.0, 1.0), x).neg().add_scalar(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Clips coded per optimizer step.
    pub batch_size: usize,
    /// Square training crop; a multiple of 64.
    pub crop: usize,
    /// Passes over the clip set during which the warm-up term is added.
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Learning rate for the final `decay_fraction` of steps.
    pub lr_final: f64,
    pub decay_fraction: f64,
    pub steps: usize,
    pub clip_norm: f64,
    pub distortion: Distortion,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lambda: f64, steps: usize, seed: u64) -> Self {
        Self {
            lambda,
            batch_size: 8,
            crop: 256,
            warmup_epochs: 15,
            lr: 1e-4,
            lr_final: 1e-5,
            decay_fraction: 0.2,
            steps,
            clip_norm: 1.0,
            distortion: Distortion::Mse,
            seed,
        }
    }

    /// Desk-scale settings for 64x64 clips.
    pub fn toy(lambda: f64, steps: usize, seed: u64) -> Self {
        Self {
            batch_size: 1,
            crop: 64,
            lr: 1e-3,
            lr_final: 1e-4,
            ..Self::new(lambda, steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::InvalidArgument(format!("crop {} is not a multiple of 64", self.crop)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let switch = (self.steps as f64 * (1.0 - self.decay_fraction)).ceil() as usize;
        if step >= switch {
            self.lr_final
        } else {
            self.lr
        }
    }
}

/// `bpp_mv + bpp_resi + lambda * d`.
pub fn rd_loss(bpp_mv: &Tensor, bpp_resi: &Tensor, distortion: &Tensor, lambda: f64) -> Tensor {
    bpp_mv.add(bpp_resi).add(&distortion.mul_scalar(lambda))
}

/// [`rd_loss`] plus `lambda * d(x_mpre, x)` while `epoch < warmup_epochs`.
pub fn warmup_loss(rd: &Tensor, warmup_distortion: &Tensor, lambda: f64, epoch: usize, warmup_epochs: usize) -> Tensor {
    if epoch >= warmup_epochs {
        return rd.clone();
    }
    rd.add(&warmup_distortion.mul_scalar(lambda))
}

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update; parameters without a gradient still decay their moments.
    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (id, g) in grads {
            let i = params.ids().position(|x| x == *id).expect("known parameter");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut w = params.get(*id).to_vec();
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            params.set(*id, w);
        }
    }
}

/// Collects parameter gradients and rescales them to a global L2 norm of at
/// most `max_norm`. Returns the gradients and the norm before clipping.
pub fn clip_gradients(params: &Params, grads: &Gradients, max_norm: f64) -> (Vec<(ParamId, Vec<f64>)>, f64) {
    let mut out: Vec<(ParamId, Vec<f64>)> = params
        .ids()
        .filter_map(|id| grads.get(params.get(id)).map(|g| (id, g.to_vec())))
        .collect();
    let norm = out.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        out.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= s));
    }
    (out, norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub bpp_mv: f64,
    pub bpp_resi: f64,
    pub distortion: f64,
    /// Rate-distortion loss without the warm-up term.
    pub rd_loss: f64,
    /// The objective actually minimized.
    pub loss: f64,
}

pub const LOG_HEADER: &str = "step,bpp_mv,bpp_resi,distortion,loss";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.8},{:.6}", self.step, self.bpp_mv, self.bpp_resi, self.distortion, self.loss)
    }
}

/// Progress through one clip.
struct Cursor {
    clip: usize,
    frames: Vec<PixelFrame>,
    next: usize,
    buffer: ReferenceBuffer,
    epoch: usize,
}

struct ClipScheduler<'a> {
    clips: &'a [Vec<PixelFrame>],
    order: Vec<usize>,
    started: usize,
    crop: usize,
}

impl ClipScheduler<'_> {
    fn start(&mut self, model: &Model, params: &Params, rng: &mut ChaCha8Rng) -> Result<Cursor> {
        let n = self.clips.len();
        if self.started % n == 0 {
            self.order = (0..n).collect();
            self.order.shuffle(rng);
        }
        let clip = self.order[self.started % n];
        let epoch = self.started / n;
        self.started += 1;
        let src = &self.clips[clip];
        let (w, h) = (src[0].width(), src[0].height());
        let (cw, ch) = (self.crop.min(w), self.crop.min(h));
        let (x0, y0) = (rng.random_range(0..=w - cw), rng.random_range(0..=h - ch));
        let frames: Vec<PixelFrame> = src.iter().map(|f| f.crop(x0, y0, cw, ch)).collect::<Result<_>>()?;
        let mut buffer = ReferenceBuffer::new(3);
        buffer.push(no_grad(|| model.extract(params, &frames[0]))?);
        Ok(Cursor {
            clip,
            frames,
            next: 1,
            buffer,
            epoch,
        })
    }
}

pub struct TrainOutcome {
    pub params: Params,
    pub history: Vec<StepLog>,
    pub rng: ChaCha8Rng,
}

/// Trains `params` in place of a copy and returns the result. `log`
/// receives a CSV row per step.
pub fn train_loop(
    model: &Model,
    params: &Params,
    clips: &[Vec<PixelFrame>],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    for (i, c) in clips.iter().enumerate() {
        if c.len() < 2 {
            return Err(Error::InvalidArgument(format!("clip {i} has fewer than 2 frames")));
        }
        let (w, h) = (c[0].width(), c[0].height());
        if w % 64 != 0 || h % 64 != 0 || c.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(Error::InvalidArgument(format!("clip {i} frames must share a size that is a multiple of 64")));
        }
    }
    let mut params = params.clone();
    let mut adam = Adam::new(&params);
    let mut rng = stream_rng(cfg.seed, "train");
    let mut sched = ClipScheduler {
        clips,
        order: Vec::new(),
        started: 0,
        crop: cfg.crop,
    };
    let mut cursors: Vec<Cursor> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        cursors.push(sched.start(model, &params, &mut rng)?);
    }
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = Tensor::scalar(0.0);
        let mut stats = [0.0; 4];
        let mut epoch = 0;
        let mut decoded = Vec::with_capacity(cursors.len());
        let share = 1.0 / cursors.len() as f64;
        for cur in cursors.iter_mut() {
            let x = cur.frames[cur.next].to_tensor();
            let refs: Vec<_> = cur.buffer.entries().cloned().collect();
            let pass = model.inter_forward(&params, &x, &refs, Some(&mut rng))?;
            let pixels = (x.dim(1) * x.dim(2)) as f64;
            let bpp_mv = pass.mv_bits.mul_scalar(1.0 / pixels);
            let bpp_resi = pass.residual_bits().mul_scalar(1.0 / pixels);
            let d = cfg.distortion.measure(&pass.x_hat, &x);
            let rd = rd_loss(&bpp_mv, &bpp_resi, &d, cfg.lambda);
            let loss = if cur.epoch < cfg.warmup_epochs {
                let x_mpre = model.warmup_head.forward(&params, &pass.pred).pixel_shuffle(2);
                warmup_loss(&rd, &cfg.distortion.measure(&x_mpre, &x), cfg.lambda, cur.epoch, cfg.warmup_epochs)
            } else {
                rd.clone()
            };
            for (s, v) in stats.iter_mut().zip([bpp_mv.item(), bpp_resi.item(), d.item(), rd.item()]) {
                *s += v * share;
            }
            epoch = epoch.max(cur.epoch);
            total = total.add(&loss.mul_scalar(1.0 / cfg.batch_size as f64));
            decoded.push(pass.x_hat.detach());
        }
        let objective = total.item();
        if !objective.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {objective} (bpp_mv {}, bpp_resi {}, distortion {}) on clip {}",
                    stats[0], stats[1], stats[2], cursors[0].clip
                ),
            });
        }
        let grads = total.backward();
        let (clipped, _) = clip_gradients(&params, &grads, cfg.clip_norm);
        adam.step(&mut params, &clipped, cfg.lr_at(step));
        for (cur, x_hat) in cursors.iter_mut().zip(decoded) {
            let frame = PixelFrame::from_tensor_clamped(&x_hat)?;
            cur.buffer.push(model.reference_feature(&params, &frame)?);
            cur.next += 1;
            if cur.next == cur.frames.len() {
                *cur = sched.start(model, &params, &mut rng)?;
            }
        }
        let entry = StepLog {
            step,
            epoch,
            bpp_mv: stats[0],
            bpp_resi: stats[1],
            distortion: stats[2],
            rd_loss: stats[3],
            loss: objective,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", entry.csv_row())?;
        }
        history.push(entry);
    }
    Ok(TrainOutcome { params, history, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::moving_texture;

    #[test]
    fn rd_loss_arithmetic() {
        let l = rd_loss(&Tensor::scalar(0.05), &Tensor::scalar(0.10), &Tensor::scalar(0.001), 256.0);
        assert!((l.item() - 0.406).abs() < 1e-12);
        let zero = rd_loss(&Tensor::scalar(0.05), &Tensor::scalar(0.10), &Tensor::scalar(0.0), 256.0);
        assert!((zero.item() - 0.15).abs() < 1e-15);
        let d = Tensor::param(vec![0.01], &[]);
        let g = rd_loss(&Tensor::scalar(0.1), &Tensor::scalar(0.2), &d, 512.0).backward();
        assert_eq!(g.get_or_zeros(&d), [512.0]);
    }

    #[test]
    fn warmup_term_only_before_threshold() {
        let rd = Tensor::scalar(1.0);
        let wd = Tensor::scalar(0.01);
        assert_eq!(warmup_loss(&rd, &wd, 100.0, 15, 15).item(), 1.0);
        assert_eq!(warmup_loss(&rd, &wd, 100.0, 14, 15).item(), 2.0);
        assert_eq!(warmup_loss(&rd, &Tensor::scalar(0.0), 100.0, 0, 15).item(), 1.0);
    }

    #[test]
    fn warmup_gradient_reaches_motion_and_refinement_without_residual_path() {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 3).unwrap();
        let frames = moving_texture(64, 64, 2, 1);
        let x = frames[1].to_tensor();
        let r = no_grad(|| m.extract(&p, &frames[0])).unwrap();
        let mut rng = stream_rng(0, "w");
        let pass = m.inter_forward(&p, &x, &[r], Some(&mut rng)).unwrap();
        let x_mpre = m.warmup_head.forward(&p, &pass.pred.detach().add(&pass.pred).mul_scalar(0.5)).pixel_shuffle(2);
        let g = Distortion::Mse.measure(&x_mpre, &x).backward();
        let touched = |prefix: &str| {
            p.iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .any(|(_, _, t)| g.get_or_zeros(t).iter().any(|v| *v != 0.0))
        };
        assert!(touched("motion.") && touched("mgp."));
        assert!(!touched("sfd."));
    }

    #[test]
    fn adam_and_clipping() {
        let mut p = Params::from_named(vec![("w".into(), Tensor::new(vec![1.0, -2.0], &[2]))]);
        let id = p.lookup("w").unwrap();
        let loss = p.get(id).square().sum_all().mul_scalar(100.0);
        let (g, norm) = clip_gradients(&p, &loss.backward(), 1.0);
        assert!((norm - 200.0 * 5f64.sqrt()).abs() < 1e-9);
        let n: f64 = g[0].1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        // the first Adam step moves every coordinate by lr against its gradient sign
        let w = p.get(id).to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_and_validation() {
        let c = TrainConfig::new(256.0, 100, 0);
        assert_eq!(c.lr_at(79), 1e-4);
        assert_eq!(c.lr_at(80), 1e-5);
        assert!(TrainConfig { crop: 100, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn short_run_is_finite_and_logged() {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 3).unwrap();
        let clips = vec![moving_texture(64, 64, 3, 1)];
        let mut csv = Vec::new();
        let out = train_loop(&m, &p, &clips, &TrainConfig::toy(512.0, 3, 0), Some(&mut csv)).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.history.iter().all(|h| h.loss.is_finite() && h.loss >= h.rd_loss));
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(LOG_HEADER));
        assert!(train_loop(&m, &p, &[moving_texture(64, 64, 1, 1)], &TrainConfig::toy(512.0, 1, 0), None).is_err());
    }
}
