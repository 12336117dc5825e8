use super::lewin::LeWinBlock;
use crate::nn::{Conv2d, ParamBuilder, Params};
use crate::tensor::{Conv2dSpec, Tensor};

const DOWN: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
    groups: 1,
};

/// Three-scale U-shaped LeWin network. Channel width doubles at each
/// downsampling; decoder scales concatenate the matching encoder output.
#[derive(Clone, Debug)]
pub struct Uformer {
    input: Conv2d,
    enc: [Vec<LeWinBlock>; 2],
    down: [Conv2d; 2],
    bottleneck: Vec<LeWinBlock>,
    /// `up[i]` lifts scale `i + 1` to scale `i`.
    up: [Conv2d; 2],
    merge: [Conv2d; 2],
    dec: [Vec<LeWinBlock>; 2],
    output: Conv2d,
}

impl Uformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        ffn_ratio: usize,
    ) -> Self {
        let mut s = pb.scope("uformer");
        let dims = [dim, 2 * dim, 4 * dim];
        let stage = |s: &mut ParamBuilder, name: &str, d: usize| {
            (0..depth)
                .map(|i| LeWinBlock::new(s, &format!("{name}.{i}"), d, heads, window, ffn_ratio))
                .collect::<Vec<_>>()
        };
        let enc = [stage(&mut s, "enc0", dims[0]), stage(&mut s, "enc1", dims[1])];
        let bottleneck = stage(&mut s, "mid", dims[2]);
        let dec = [stage(&mut s, "dec0", dims[0]), stage(&mut s, "dec1", dims[1])];
        Self {
            input: Conv2d::same(&mut s, "input", in_ch, dim, 3),
            enc,
            down: [
                Conv2d::new(&mut s, "down0", dims[0], dims[1], 4, DOWN),
                Conv2d::new(&mut s, "down1", dims[1], dims[2], 4, DOWN),
            ],
            bottleneck,
            up: [
                Conv2d::same(&mut s, "up0", dims[1], 4 * dims[0], 1),
                Conv2d::same(&mut s, "up1", dims[2], 4 * dims[1], 1),
            ],
            merge: [
                Conv2d::same(&mut s, "merge0", 2 * dims[0], dims[0], 1),
                Conv2d::same(&mut s, "merge1", 2 * dims[1], dims[1], 1),
            ],
            dec,
            output: Conv2d::same(&mut s, "output", dim, out_ch, 3),
        }
    }

    fn run(blocks: &[LeWinBlock], p: &Params, x: Tensor) -> Tensor {
        blocks.iter().fold(x, |h, b| b.forward(p, &h))
    }

    /// Returns the output and the spatial sizes of the three scales.
    pub fn forward_with_scales(&self, p: &Params, x: &Tensor) -> (Tensor, [(usize, usize); 3]) {
        let h0 = self.input.forward(p, x);
        let e0 = Self::run(&self.enc[0], p, h0);
        let e1 = Self::run(&self.enc[1], p, self.down[0].forward(p, &e0));
        let m = Self::run(&self.bottleneck, p, self.down[1].forward(p, &e1));
        let scales = [(e0.dim(1), e0.dim(2)), (e1.dim(1), e1.dim(2)), (m.dim(1), m.dim(2))];
        let u1 = self.up[1].forward(p, &m).pixel_shuffle(2);
        let d1 = self.merge[1].forward(p, &Tensor::concat(&[&u1, &e1], 0));
        let d1 = Self::run(&self.dec[1], p, d1);
        let u0 = self.up[0].forward(p, &d1).pixel_shuffle(2);
        let d0 = self.merge[0].forward(p, &Tensor::concat(&[&u0, &e0], 0));
        let d0 = Self::run(&self.dec[0], p, d0);
        (self.output.forward(p, &d0), scales)
    }

    pub fn uformer_estimate(&self, p: &Params, fused: &Tensor) -> Tensor {
        self.forward_with_scales(p, fused).0
    }
}
