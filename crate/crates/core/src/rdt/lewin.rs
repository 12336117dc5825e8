use std::sync::Arc;

use crate::attention::{fit_window, window_partition, window_reverse, WindowAttention};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, ParamBuilder, ParamId, Params};
use crate::tensor::{Conv2dSpec, Tensor};

/// Locally-enhanced window transformer block on a `[D, H, W]` map.
///
/// `F_a = W-MSA(LN(F + pos)) + F`, then a feed-forward branch whose hidden
/// map passes through a depthwise 3x3 convolution, added back onto `F_a`.
#[derive(Clone, Debug)]
pub struct LeWinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub pos: ParamId,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub dwconv: Conv2d,
    pub ffn_out: Linear,
    pub window: usize,
}

impl LeWinBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, window: usize, ffn_ratio: usize) -> Self {
        let mut s = pb.scope(name);
        let hidden = dim * ffn_ratio;
        Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: WindowAttention::new(&mut s, "attn", dim, heads),
            pos: s.tensor("pos", &[window * window, dim], Init::Normal(0.02)),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            ffn_in: Linear::new(&mut s, "ffn_in", dim, hidden, Init::Fan(dim)),
            dwconv: Conv2d::new(
                &mut s,
                "dwconv",
                hidden,
                hidden,
                3,
                Conv2dSpec {
                    stride: 1,
                    padding: 1,
                    groups: hidden,
                },
            ),
            ffn_out: Linear::new(&mut s, "ffn_out", hidden, dim, Init::Fan(hidden)),
            window,
        }
    }

    /// In-window position embeddings for a `ws x ws` window (the top-left
    /// corner of the full table when the map is too small for a full window).
    fn position_table(&self, p: &Params, ws: usize) -> Tensor {
        let table = p.get(self.pos);
        if ws == self.window {
            return table.clone();
        }
        let rows: Vec<usize> = (0..ws * ws).map(|i| (i / ws) * self.window + i % ws).collect();
        table.transpose_last().gather_last(Arc::new(rows)).transpose_last()
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        let (_, h, w) = x.chw();
        let ws = fit_window(h, w, self.window);
        let xw = window_partition(x, ws);
        let xin = xw.add(&self.position_table(p, ws));
        let fa = self.attn.forward(p, &self.norm1.forward(p, &xin), ws, None).add(&xw);
        let hidden = self.ffn_in.forward(p, &self.norm2.forward(p, &fa)).gelu();
        let hidden = self.dwconv.forward(p, &window_reverse(&hidden, h, w, ws)).gelu();
        let out = self.ffn_out.forward(p, &window_partition(&hidden, ws)).add(&fa);
        window_reverse(&out, h, w, ws)
    }
}
