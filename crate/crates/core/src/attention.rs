//! Window-based multi-head self-attention shared by the motion estimator and
//! the residual transformer.
//!
//! Logits are `Q K^T / sqrt(d) + B` with `B` a learned relative-position bias.
//! The residual transformer additionally passes a prior term: query/key
//! tokens of the prediction feature whose (unscaled) similarity, weighted by
//! a learned per-head modulator, is added to the logits.

use std::sync::Arc;

use crate::nn::{Init, Linear, ParamBuilder, ParamId, Params};
use crate::tensor::Tensor;

/// Largest supported window side; bias tables are sized for it.
pub const MAX_WINDOW: usize = 8;
const TABLE_SIDE: usize = 2 * MAX_WINDOW - 1;

/// `[D, H, W] -> [nW, w*w, D]` with windows in raster order.
pub fn window_partition(x: &Tensor, w: usize) -> Tensor {
    let (d, h, wd) = x.chw();
    assert!(h % w == 0 && wd % w == 0, "{h}x{wd} not divisible by window {w}");
    x.reshape(&[d, h / w, w, wd / w, w])
        .permute(&[1, 3, 2, 4, 0])
        .reshape(&[(h / w) * (wd / w), w * w, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(x: &Tensor, h: usize, wd: usize, w: usize) -> Tensor {
    let d = x.dim(2);
    x.reshape(&[h / w, wd / w, w, w, d])
        .permute(&[4, 0, 2, 1, 3])
        .reshape(&[d, h, wd])
}

/// Largest window side `<= max` that tiles an `h x w` grid.
pub fn fit_window(h: usize, w: usize, max: usize) -> usize {
    (1..=max.min(h).min(w)).rev().find(|d| h % d == 0 && w % d == 0).unwrap_or(1)
}

/// Flattened bias-table index for every (query, key) pair of a `w x w` window.
pub fn relative_index(w: usize) -> Arc<Vec<usize>> {
    assert!(w <= MAX_WINDOW);
    let n = w * w;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        for j in 0..n {
            let (yj, xj) = (j / w, j % w);
            let dy = yi as isize - yj as isize + (MAX_WINDOW as isize - 1);
            let dx = xi as isize - xj as isize + (MAX_WINDOW as isize - 1);
            idx.push(dy as usize * TABLE_SIDE + dx as usize);
        }
    }
    Arc::new(idx)
}

/// Extra logit term `mod_h * Q_p K_p^T` from the prediction feature. `q`/`k`
/// are window tokens `[nW, N, D]`; `modulator` is a per-head scalar `[heads]`.
/// (A constant added per head would cancel in the softmax, so the modulator
/// scales the similarity instead.)
pub struct PriorLogits<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub modulator: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl WindowAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let mut s = pb.scope(name);
        Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, Init::Fan(dim)),
            proj: Linear::new(&mut s, "proj", dim, dim, Init::Fan(dim)),
            rel_bias: s.tensor("rel_bias", &[heads, TABLE_SIDE * TABLE_SIDE], Init::Normal(0.02)),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Query and key projections of `x` (last axis `D`), using the same
    /// weights as the attention itself.
    pub fn project_qk(&self, p: &Params, x: &Tensor) -> (Tensor, Tensor) {
        let w = p.get(self.qkv.w);
        let b = p.get(self.qkv.b.expect("qkv has bias"));
        let d = self.dim;
        let q = x.linear(&w.narrow(1, 0, d), Some(&b.narrow(0, 0, d)));
        let k = x.linear(&w.narrow(1, d, d), Some(&b.narrow(0, d, d)));
        (q, k)
    }

    /// `[nW, N, D] -> [nW * heads, N, d]`
    fn split_heads(&self, t: &Tensor) -> Tensor {
        let (nw, n) = (t.dim(0), t.dim(1));
        let hd = self.head_dim();
        t.reshape(&[nw, n, self.heads, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[nw * self.heads, n, hd])
    }

    /// Attention over window tokens `x: [nW, N, D]` with `N = window^2`.
    pub fn forward(&self, p: &Params, x: &Tensor, window: usize, prior: Option<PriorLogits<'_>>) -> Tensor {
        let [nw, n, d] = *x.shape() else {
            panic!("window attention expects [nW, N, D], got {:?}", x.shape())
        };
        assert_eq!(n, window * window);
        assert_eq!(d, self.dim);
        let (h, hd) = (self.heads, self.head_dim());
        let qkv = self
            .qkv
            .forward(p, x)
            .reshape(&[nw, n, 3, h, hd])
            .permute(&[2, 0, 3, 1, 4])
            .reshape(&[3, nw * h, n, hd]);
        let q = qkv.narrow(0, 0, 1).reshape(&[nw * h, n, hd]);
        let k = qkv.narrow(0, 1, 1).reshape(&[nw * h, n, hd]);
        let v = qkv.narrow(0, 2, 1).reshape(&[nw * h, n, hd]);
        let scale = 1.0 / (hd as f64).sqrt();
        let bias = p
            .get(self.rel_bias)
            .gather_last(relative_index(window))
            .reshape(&[h, n, n]);
        let mut logits = q.matmul_t(&k).mul_scalar(scale).reshape(&[nw, h, n, n]).add(&bias);
        if let Some(prior) = prior {
            let qp = self.split_heads(prior.q);
            let kp = self.split_heads(prior.k);
            let sim = qp.matmul_t(&kp).reshape(&[nw, h, n, n]);
            logits = logits.add(&sim.mul(&prior.modulator.reshape(&[h, 1, 1])));
        }
        let attn = logits.softmax_last().reshape(&[nw * h, n, n]);
        let out = attn
            .matmul(&v)
            .reshape(&[nw, h, n, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[nw, n, d]);
        self.proj.forward(p, &out)
    }
}
