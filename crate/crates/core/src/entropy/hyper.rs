use super::factorized::FactorizedPrior;
use super::gaussian::SCALE_BOUND;
use crate::nn::{Conv2d, ParamBuilder, Params};
use crate::tensor::{Conv2dSpec, Tensor};

const STRIDE2: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
    groups: 1,
};

/// Mean-scale hyperprior: a 4x further downsampled side latent `z` (coded
/// with a factorized density) predicts a Gaussian per latent element.
#[derive(Clone, Debug)]
pub struct HyperPrior {
    analysis: [Conv2d; 3],
    synth_in: Conv2d,
    up: [Conv2d; 2],
    synth_out: Conv2d,
    pub z_prior: FactorizedPrior,
    pub latent: usize,
}

impl HyperPrior {
    pub fn new(pb: &mut ParamBuilder, latent: usize, hyper: usize, components: usize) -> Self {
        let mut s = pb.scope("hyper");
        Self {
            analysis: [
                Conv2d::same(&mut s, "ha0", latent, hyper, 3),
                Conv2d::new(&mut s, "ha1", hyper, hyper, 3, STRIDE2),
                Conv2d::new(&mut s, "ha2", hyper, hyper, 3, STRIDE2),
            ],
            synth_in: Conv2d::same(&mut s, "hs0", hyper, hyper, 3),
            up: [
                Conv2d::same(&mut s, "hs_up0", hyper, 4 * hyper, 3),
                Conv2d::same(&mut s, "hs_up1", hyper, 4 * hyper, 3),
            ],
            synth_out: Conv2d::same(&mut s, "hs_out", hyper, 2 * latent, 3),
            z_prior: FactorizedPrior::new(&mut s, "z_prior", hyper, components),
            latent,
        }
    }

    /// `y: [C_r, h, w] -> z: [C_z, ceil(h/4), ceil(w/4)]`
    pub fn analyze(&self, p: &Params, y: &Tensor) -> Tensor {
        let a = self.analysis[0].forward(p, y).relu();
        let a = self.analysis[1].forward(p, &a).relu();
        self.analysis[2].forward(p, &a)
    }

    /// Means and scales for a latent of spatial size `h x w`.
    pub fn synthesize(&self, p: &Params, z_hat: &Tensor, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut t = self.synth_in.forward(p, z_hat).relu();
        for up in &self.up {
            t = up.forward(p, &t).pixel_shuffle(2).relu();
        }
        let out = self.synth_out.forward(p, &t).crop(0, 0, h, w);
        let c = self.latent;
        let mu = out.narrow(0, 0, c);
        let sigma = out.narrow(0, c, c).softplus().bound_below(SCALE_BOUND);
        (mu, sigma)
    }
}
