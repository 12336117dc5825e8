use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How the per-tap confidence mask is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Softmax over the 9 taps of each group.
    Softmax,
    /// Independent sigmoid per tap (unnormalized).
    Sigmoid,
}

/// Component switches for ablation runs. Everything enabled is the full codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Transformer motion estimator; when off a plain convolutional estimator is used.
    pub rdt: bool,
    /// Multi-reference refinement; when off the fused prediction is the coarse one.
    pub mgp: bool,
    /// Prediction-similarity term in residual attention.
    pub sfd_prior: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            rdt: true,
            mgp: true,
            sfd_prior: true,
        }
    }
}

impl Ablation {
    /// Parses a comma separated list of components to disable (`rdt,mgp,sfd`).
    pub fn disabling(list: &[String]) -> Result<Self, String> {
        let mut a = Self::default();
        for item in list {
            match item.trim() {
                "rdt" => a.rdt = false,
                "mgp" => a.mgp = false,
                "sfd" => a.sfd_prior = false,
                "" => {}
                other => return Err(format!("unknown ablation '{other}' (expected rdt, mgp or sfd)")),
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature channels of the half-resolution feature domain.
    pub channels: usize,
    /// ResBlocks in the feature stem and in the reconstruction head.
    pub resblocks: usize,
    pub uformer_dim: usize,
    /// LeWin blocks per Uformer scale.
    pub uformer_depth: usize,
    /// Attention heads; also the number of deformable groups.
    pub heads: usize,
    pub window: usize,
    pub ffn_ratio: usize,
    /// Channels of the Uformer output (motion latent).
    pub motion_latent: usize,
    /// Channels of the coded motion representation.
    pub motion_code: usize,
    pub sfd_dims: [usize; 4],
    pub sfd_heads: [usize; 4],
    pub sfd_depths: [usize; 4],
    pub residual_latent: usize,
    pub hyper_channels: usize,
    /// Logistic components of the factorized density.
    pub mixture_components: usize,
    pub mask_mode: MaskMode,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            channels: 64,
            resblocks: 3,
            uformer_dim: 32,
            uformer_depth: 2,
            heads: 8,
            window: 8,
            ffn_ratio: 4,
            motion_latent: 64,
            motion_code: 64,
            sfd_dims: [64, 128, 192, 256],
            sfd_heads: [4, 4, 8, 8],
            sfd_depths: [2, 2, 6, 2],
            residual_latent: 96,
            hyper_channels: 64,
            mixture_components: 3,
            mask_mode: MaskMode::Softmax,
            ablation: Ablation::default(),
        }
    }

    /// Small configuration for tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            channels: 32,
            resblocks: 1,
            uformer_dim: 16,
            uformer_depth: 1,
            heads: 4,
            window: 8,
            ffn_ratio: 2,
            motion_latent: 16,
            motion_code: 16,
            sfd_dims: [16, 32, 48, 64],
            sfd_heads: [2, 2, 4, 4],
            sfd_depths: [2, 2, 6, 2],
            residual_latent: 32,
            hyper_channels: 16,
            mixture_components: 3,
            mask_mode: MaskMode::Softmax,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn groups(&self) -> usize {
        self.heads
    }

    /// Decoder stage depths, coarsest first.
    pub fn sfd_decoder_depths(&self) -> [usize; 4] {
        let d = self.sfd_depths;
        [d[3], d[2], d[1], d[0]]
    }

    pub fn validate(&self) -> Result<(), String> {
        let c = self;
        if c.channels == 0 || c.heads == 0 || c.window == 0 {
            return Err("channels, heads and window must be positive".into());
        }
        if c.channels % c.heads != 0 {
            return Err(format!("channels {} not divisible by deformable groups {}", c.channels, c.heads));
        }
        if c.uformer_dim % c.heads != 0 {
            return Err(format!("uformer_dim {} not divisible by heads {}", c.uformer_dim, c.heads));
        }
        if c.window > 8 {
            return Err("window larger than 8 is not supported by the position tables".into());
        }
        for (d, h) in c.sfd_dims.iter().zip(&c.sfd_heads) {
            if *h == 0 || d % h != 0 {
                return Err(format!("sfd dim {d} not divisible by heads {h}"));
            }
        }
        Ok(())
    }

    /// Digest of the architecture hyperparameters and the rate-distortion weight.
    pub fn hash_with_lambda(&self, lambda: f64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(lambda.to_le_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        out
    }
}

/// The four rate points a model family is trained for.
pub const LAMBDAS: [f64; 4] = [256.0, 512.0, 1024.0, 2048.0];

/// Index of `lambda` in [`LAMBDAS`], or 255 for a custom value.
pub fn lambda_id(lambda: f64) -> u8 {
    LAMBDAS.iter().position(|&l| l == lambda).map(|i| i as u8).unwrap_or(255)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::full().sfd_decoder_depths(), [2, 6, 2, 2]);
    }

    #[test]
    fn hash_depends_on_lambda_and_ablation() {
        let c = ModelConfig::toy();
        assert_ne!(c.hash_with_lambda(256.0), c.hash_with_lambda(2048.0));
        let d = c.clone().with_ablation(Ablation { mgp: false, ..Ablation::default() });
        assert_ne!(c.hash_with_lambda(256.0), d.hash_with_lambda(256.0));
        assert_eq!(c.hash_with_lambda(512.0), ModelConfig::toy().hash_with_lambda(512.0));
    }

    #[test]
    fn ablation_parsing() {
        let a = Ablation::disabling(&["mgp".into(), "sfd".into()]).unwrap();
        assert!(a.rdt && !a.mgp && !a.sfd_prior);
        assert!(Ablation::disabling(&["nope".into()]).is_err());
        assert_eq!(lambda_id(1024.0), 2);
        assert_eq!(lambda_id(100.0), 255);
    }
}
