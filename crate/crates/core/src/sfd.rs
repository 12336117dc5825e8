//! Residual transformer coder whose attention logits include a similarity
//! prior computed from the prediction feature.
//!
//! Each encoder stage attends within windows using
//! `softmax(Q_R K_R^T / sqrt(d) + B + mod * Q_p K_p^T) V_R`, where `Q_p`, `K_p`
//! come from the prediction and are downsampled alongside the residual tokens.
//! The decoder mirrors the stages and reuses the same prior pyramid, which it
//! can rebuild exactly because the prediction is available on both sides.

use crate::attention::{fit_window, window_partition, window_reverse, PriorLogits, WindowAttention};
use crate::config::ModelConfig;
use crate::entropy::HyperPrior;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamBuilder, ParamId, Params};
use crate::tensor::Tensor;
use crate::transform::FrameFeature;

pub const LEVELS: usize = 4;

/// Prior query/key maps `[D_l, h_l, w_l]` of one pyramid level.
#[derive(Clone, Debug)]
pub struct PriorLevel {
    pub q: Tensor,
    pub k: Tensor,
}

/// Applies a token-wise layer to a `[D, h, w]` map.
fn on_tokens(x: &Tensor, f: impl FnOnce(&Tensor) -> Tensor) -> Tensor {
    let (_, h, w) = x.chw();
    f(&x.to_tokens()).from_tokens(h, w)
}

fn check_even(x: &Tensor, what: &str) -> Result<()> {
    let (_, h, w) = x.chw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("{what}: token grid {h}x{w} must have even sides")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SfdBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub modulator: ParamId,
    pub norm2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub window: usize,
}

impl SfdBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, window: usize, ratio: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: WindowAttention::new(&mut s, "attn", dim, heads),
            modulator: s.tensor("modulator", &[heads], Init::Zeros),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            mlp1: Linear::new(&mut s, "mlp1", dim, ratio * dim, Init::Fan(dim)),
            mlp2: Linear::new(&mut s, "mlp2", ratio * dim, dim, Init::Fan(ratio * dim)),
            window,
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor, prior: Option<&PriorLevel>) -> Result<Tensor> {
        let (_, h, w) = x.chw();
        let ws = fit_window(h, w, self.window);
        let xw = window_partition(x, ws);
        let windows = prior.map(|pr| (window_partition(&pr.q, ws), window_partition(&pr.k, ws)));
        if let Some((q, k)) = &windows {
            if q.shape() != xw.shape() || k.shape() != xw.shape() {
                return Err(Error::Shape(format!(
                    "prior tokens {:?} do not match residual tokens {:?}",
                    q.shape(),
                    xw.shape()
                )));
            }
        }
        let modulator = p.get(self.modulator);
        let logits = windows.as_ref().map(|(q, k)| PriorLogits { q, k, modulator });
        let a = self.attn.forward(p, &self.norm1.forward(p, &xw), ws, logits).add(&xw);
        let m = self.mlp2.forward(p, &self.mlp1.forward(p, &self.norm2.forward(p, &a)).gelu());
        Ok(window_reverse(&m.add(&a), h, w, ws))
    }
}

/// `2x2` token grouping followed by a linear map (and a norm).
#[derive(Clone, Debug)]
pub struct Regroup {
    pub norm: LayerNorm,
    pub linear: Linear,
    /// Merging normalizes before the projection; prior downsampling after.
    pub norm_first: bool,
}

impl Regroup {
    fn merge(pb: &mut ParamBuilder, name: &str, dim: usize, out: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            norm: LayerNorm::new(&mut s, "norm", 4 * dim),
            linear: Linear::new(&mut s, "linear", 4 * dim, out, Init::Fan(4 * dim)),
            norm_first: true,
        }
    }

    fn prior(pb: &mut ParamBuilder, name: &str, dim: usize, out: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            norm: LayerNorm::new(&mut s, "norm", out),
            linear: Linear::new(&mut s, "linear", 4 * dim, out, Init::Fan(4 * dim)),
            norm_first: false,
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        check_even(x, "2x2 regrouping")?;
        Ok(on_tokens(&x.pixel_unshuffle(2), |t| {
            if self.norm_first {
                self.linear.forward(p, &self.norm.forward(p, t))
            } else {
                self.norm.forward(p, &self.linear.forward(p, t))
            }
        }))
    }
}

#[derive(Clone, Debug)]
pub struct SfdCodec {
    pub embed: Linear,
    pub enc: Vec<Vec<SfdBlock>>,
    pub merges: Vec<Regroup>,
    pub prior_q: Vec<Regroup>,
    pub prior_k: Vec<Regroup>,
    pub to_latent: Linear,
    pub from_latent: Linear,
    /// Coarsest level first.
    pub dec: Vec<Vec<SfdBlock>>,
    /// `splits[i]` lifts level `LEVELS - 1 - i` to the next finer level.
    pub splits: Vec<Linear>,
    pub unembed: Linear,
    pub hyper: HyperPrior,
    pub use_prior: bool,
    pub dims: [usize; LEVELS],
}

impl SfdCodec {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("sfd");
        let (c, d, heads) = (cfg.channels, cfg.sfd_dims, cfg.sfd_heads);
        let ratio = cfg.ffn_ratio;
        let stage = |s: &mut ParamBuilder, name: &str, l: usize, depth: usize| -> Vec<SfdBlock> {
            (0..depth)
                .map(|i| SfdBlock::new(s, &format!("{name}{l}.{i}"), d[l], heads[l], cfg.window, ratio))
                .collect()
        };
        let enc = (0..LEVELS).map(|l| stage(&mut s, "enc", l, cfg.sfd_depths[l])).collect();
        let dec_depths = cfg.sfd_decoder_depths();
        let dec = (0..LEVELS).map(|i| stage(&mut s, "dec", LEVELS - 1 - i, dec_depths[i])).collect();
        Self {
            embed: Linear::new(&mut s, "embed", 4 * c, d[0], Init::Fan(4 * c)),
            enc,
            merges: (0..LEVELS - 1).map(|l| Regroup::merge(&mut s, &format!("merge{l}"), d[l], d[l + 1])).collect(),
            prior_q: (0..LEVELS - 1).map(|l| Regroup::prior(&mut s, &format!("prior_q{l}"), d[l], d[l + 1])).collect(),
            prior_k: (0..LEVELS - 1).map(|l| Regroup::prior(&mut s, &format!("prior_k{l}"), d[l], d[l + 1])).collect(),
            to_latent: Linear::new(&mut s, "to_latent", d[3], cfg.residual_latent, Init::Fan(d[3])),
            from_latent: Linear::new(&mut s, "from_latent", cfg.residual_latent, d[3], Init::Fan(cfg.residual_latent)),
            dec,
            splits: (0..LEVELS - 1)
                .map(|i| {
                    let l = LEVELS - 1 - i;
                    Linear::new(&mut s, &format!("split{l}"), d[l], 4 * d[l - 1], Init::Fan(d[l]))
                })
                .collect(),
            unembed: Linear::new(&mut s, "unembed", d[0], 4 * c, Init::Fan(d[0])),
            hyper: HyperPrior::new(&mut s, cfg.residual_latent, cfg.hyper_channels, cfg.mixture_components),
            use_prior: cfg.ablation.sfd_prior,
            dims: d,
        }
    }

    /// `[C, H, W] -> [D_0, H/2, W/2]` through 2x2 patches and a linear map.
    pub fn embed_patches(&self, p: &Params, feature: &FrameFeature) -> Result<Tensor> {
        let (_, h, w) = feature.chw();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!("feature {h}x{w} must be divisible by 16")));
        }
        Ok(on_tokens(&feature.pixel_unshuffle(2), |t| self.embed.forward(p, t)))
    }

    /// Level `l + 1` prior from level `l`.
    pub fn downsample_prior(&self, p: &Params, level: usize, prior: &PriorLevel) -> Result<PriorLevel> {
        Ok(PriorLevel {
            q: self.prior_q[level].forward(p, &prior.q)?,
            k: self.prior_k[level].forward(p, &prior.k)?,
        })
    }

    /// Prior pyramid from the prediction; `None` when the prior term is disabled.
    pub fn build_prior(&self, p: &Params, pred: &FrameFeature) -> Result<Option<Vec<PriorLevel>>> {
        if !self.use_prior {
            return Ok(None);
        }
        let e = self.embed_patches(p, pred)?;
        let first = &self.enc[0][0];
        let (q, k) = on_tokens_pair(&e, |t| first.attn.project_qk(p, &first.norm1.forward(p, t)));
        let mut levels = vec![PriorLevel { q, k }];
        for l in 0..LEVELS - 1 {
            let next = self.downsample_prior(p, l, &levels[l])?;
            levels.push(next);
        }
        Ok(Some(levels))
    }

    /// Residual feature to the pre-quantization latent `[C_r, H/16, W/16]`.
    pub fn encode_with_prior(&self, p: &Params, resi: &FrameFeature, prior: Option<&[PriorLevel]>) -> Result<Tensor> {
        let mut x = self.embed_patches(p, resi)?;
        for l in 0..LEVELS {
            for b in &self.enc[l] {
                x = b.forward(p, &x, prior.map(|pr| &pr[l]))?;
            }
            if l + 1 < LEVELS {
                x = self.merges[l].forward(p, &x)?;
            }
        }
        Ok(on_tokens(&x, |t| self.to_latent.forward(p, t)))
    }

    pub fn decode_with_prior(&self, p: &Params, q: &Tensor, prior: Option<&[PriorLevel]>) -> Result<Tensor> {
        let mut x = on_tokens(q, |t| self.from_latent.forward(p, t));
        for i in 0..LEVELS {
            let l = LEVELS - 1 - i;
            for b in &self.dec[i] {
                x = b.forward(p, &x, prior.map(|pr| &pr[l]))?;
            }
            if l > 0 {
                x = on_tokens(&x, |t| self.splits[i].forward(p, t)).pixel_shuffle(2);
            }
        }
        Ok(on_tokens(&x, |t| self.unembed.forward(p, t)).pixel_shuffle(2))
    }

    pub fn sfd_encode(&self, p: &Params, resi: &FrameFeature, pred: &FrameFeature) -> Result<Tensor> {
        let prior = self.build_prior(p, pred)?;
        self.encode_with_prior(p, resi, prior.as_deref())
    }

    pub fn sfd_decode(&self, p: &Params, q: &Tensor, pred: &FrameFeature) -> Result<Tensor> {
        let prior = self.build_prior(p, pred)?;
        self.decode_with_prior(p, q, prior.as_deref())
    }
}

fn on_tokens_pair(x: &Tensor, f: impl FnOnce(&Tensor) -> (Tensor, Tensor)) -> (Tensor, Tensor) {
    let (_, h, w) = x.chw();
    let (a, b) = f(&x.to_tokens());
    (a.from_tokens(h, w), b.from_tokens(h, w))
}
