//! Slow, loop-based reference implementations used to check the fast paths.
//!
//! Nothing here touches the autodiff engine: inputs are plain slices and every
//! sum is written out explicitly.

use crate::attention::WindowAttention;
use crate::nn::Params;

pub struct AttentionWeights {
    pub dim: usize,
    pub heads: usize,
    /// `[dim, 3 dim]`
    pub wqkv: Vec<f64>,
    pub bqkv: Vec<f64>,
    /// `[dim, dim]`
    pub wproj: Vec<f64>,
    pub bproj: Vec<f64>,
    /// `[heads, 15 * 15]`
    pub table: Vec<f64>,
}

impl AttentionWeights {
    pub fn from_params(p: &Params, a: &WindowAttention) -> Self {
        Self {
            dim: a.dim,
            heads: a.heads,
            wqkv: p.get(a.qkv.w).to_vec(),
            bqkv: p.get(a.qkv.b.expect("bias")).to_vec(),
            wproj: p.get(a.proj.w).to_vec(),
            bproj: p.get(a.proj.b.expect("bias")).to_vec(),
            table: p.get(a.rel_bias).to_vec(),
        }
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], fan_in: usize, fan_out: usize, col0: usize, cols: usize) -> Vec<f64> {
    let n = x.len() / fan_in;
    let mut out = vec![0.0; n * cols];
    for t in 0..n {
        for j in 0..cols {
            let mut s = b[col0 + j];
            for i in 0..fan_in {
                s += x[t * fan_in + i] * w[i * fan_out + col0 + j];
            }
            out[t * cols + j] = s;
        }
    }
    out
}

/// One `w x w` window, tokens `x: [w*w, dim]` in raster order.
/// `prior = (q_p, k_p, modulator)` adds `mod * q_p k_p^T` to each head's logits.
pub fn window_attention(a: &AttentionWeights, x: &[f64], w: usize, prior: Option<(&[f64], &[f64], &[f64])>) -> Vec<f64> {
    let (d, h) = (a.dim, a.heads);
    let n = w * w;
    let hd = d / h;
    let q = affine(x, &a.wqkv, &a.bqkv, d, 3 * d, 0, d);
    let k = affine(x, &a.wqkv, &a.bqkv, d, 3 * d, d, d);
    let v = affine(x, &a.wqkv, &a.bqkv, d, 3 * d, 2 * d, d);
    let side = 15;
    let mut heads_out = vec![0.0; n * d];
    for head in 0..h {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..hd {
                    dot += q[i * d + head * hd + c] * k[j * d + head * hd + c];
                }
                let dy = (i / w) as isize - (j / w) as isize + 7;
                let dx = (i % w) as isize - (j % w) as isize + 7;
                *l = dot / (hd as f64).sqrt() + a.table[head * side * side + dy as usize * side + dx as usize];
                if let Some((qp, kp, m)) = prior {
                    let mut pd = 0.0;
                    for c in 0..hd {
                        pd += qp[i * d + head * hd + c] * kp[j * d + head * hd + c];
                    }
                    *l += m[head] * pd;
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let pj = (l - mx).exp() / z;
                for c in 0..hd {
                    heads_out[i * d + head * hd + c] += pj * v[j * d + head * hd + c];
                }
            }
        }
    }
    affine(&heads_out, &a.wproj, &a.bproj, d, d, 0, d)
}

/// Bilinear sample of an `h x w` plane at `(y, x)` with coordinates clamped to the border.
pub fn bilinear_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    plane[y0 * w + x0] * (1.0 - ly) * (1.0 - lx)
        + plane[y0 * w + x1] * (1.0 - ly) * lx
        + plane[y1 * w + x0] * ly * (1.0 - lx)
        + plane[y1 * w + x1] * ly * lx
}

/// Modulated deformable 3x3 convolution written as an explicit
/// gather-interpolate-sum. `offsets: [G*9*2, H, W]` as `(dy, dx)` pairs,
/// `mask: [G*9, H, W]`, `weight: [Co, C, 9]`.
#[allow(clippy::too_many_arguments)]
pub fn deform_conv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    offsets: &[f64],
    mask: &[f64],
    weight: &[f64],
    bias: &[f64],
    groups: usize,
) -> Vec<f64> {
    let co = bias.len();
    let cpg = c / groups;
    let hw = h * w;
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        for py in 0..h {
            for px in 0..w {
                let pos = py * w + px;
                let mut acc = bias[o];
                for ci in 0..c {
                    let g = ci / cpg;
                    for k in 0..9 {
                        let t = g * 9 + k;
                        let dy = offsets[(2 * t) * hw + pos];
                        let dx = offsets[(2 * t + 1) * hw + pos];
                        let sy = py as f64 + (k / 3) as f64 - 1.0 + dy;
                        let sx = px as f64 + (k % 3) as f64 - 1.0 + dx;
                        let v = bilinear_clamped(&x[ci * hw..(ci + 1) * hw], h, w, sy, sx);
                        acc += weight[(o * c + ci) * 9 + k] * mask[t * hw + pos] * v;
                    }
                }
                out[o * hw + pos] = acc;
            }
        }
    }
    out
}

/// Embedded-Gaussian non-local attention from `query: [Nq, C]` to
/// `keys: [Nk, C]`, returning `out(softmax(theta phi^T) g)` of shape `[Nq, C]`.
/// Weight matrices are `[C, inner]` and `[inner, C]` with biases.
#[allow(clippy::too_many_arguments)]
pub fn non_local(
    query: &[f64],
    keys: &[f64],
    c: usize,
    inner: usize,
    theta: (&[f64], &[f64]),
    phi: (&[f64], &[f64]),
    g: (&[f64], &[f64]),
    out: (&[f64], &[f64]),
) -> Vec<f64> {
    let th = affine(query, theta.0, theta.1, c, inner, 0, inner);
    let ph = affine(keys, phi.0, phi.1, c, inner, 0, inner);
    let gv = affine(keys, g.0, g.1, c, inner, 0, inner);
    let nq = query.len() / c;
    let nk = keys.len() / c;
    let mut y = vec![0.0; nq * inner];
    for i in 0..nq {
        let s: Vec<f64> = (0..nk)
            .map(|j| (0..inner).map(|e| th[i * inner + e] * ph[j * inner + e]).sum())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..nk {
            let a = (s[j] - mx).exp() / z;
            for e in 0..inner {
                y[i * inner + e] += a * gv[j * inner + e];
            }
        }
    }
    affine(&y, out.0, out.1, inner, c, 0, c)
}

/// Central finite-difference derivative of `f` with respect to `x[i]`.
pub fn finite_difference(x: &mut [f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let up = f(x);
    x[i] = orig - eps;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_grid_points_and_clamps() {
        let plane = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(bilinear_clamped(&plane, 2, 3, 1.0, 2.0), 5.0);
        assert_eq!(bilinear_clamped(&plane, 2, 3, -3.0, 9.0), 2.0);
        assert!((bilinear_clamped(&plane, 2, 3, 0.5, 0.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_of_square() {
        let mut x = [3.0];
        let d = finite_difference(&mut x, 0, 1e-5, |v| v[0] * v[0]);
        assert!((d - 6.0).abs() < 1e-8);
        assert_eq!(x[0], 3.0);
    }
}
