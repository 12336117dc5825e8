use std::sync::Arc;

use super::{numel, Tensor};

/// `c = a * b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every accessed element inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `c = a b + beta c` with `a: [m, k]`, `b: [k, n]`.
pub(crate) fn gemm_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1), beta);
}

/// `c = a^T b` with `a: [k, m]`, `b: [k, n]`.
pub(crate) fn gemm_tn_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c, (n, 1), 0.0);
}

/// `c = a b^T` with `a: [m, k]`, `b: [n, k]`.
pub(crate) fn gemm_nt_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c, (n, 1), 0.0);
}

impl Tensor {
    /// Matrix product over the last two axes. `other` is either a matrix
    /// (shared across all leading axes of `self`) or has the same leading axes.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        bmm(self, other, false)
    }

    /// `self * other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        bmm(self, other, true)
    }

    /// `x * w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add(b),
            None => y,
        }
    }
}

fn bmm(a: &Tensor, b: &Tensor, tb: bool) -> Tensor {
    let ar = a.rank();
    assert!(ar >= 2 && b.rank() >= 2, "matmul needs matrices");
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let br = b.rank();
    let (bk, n) = if tb {
        (b.shape()[br - 1], b.shape()[br - 2])
    } else {
        (b.shape()[br - 2], b.shape()[br - 1])
    };
    assert_eq!(k, bk, "matmul inner dims: {:?} x {:?} (tb={tb})", a.shape(), b.shape());
    let shared = br == 2;
    let batch = numel(&a.shape()[..ar - 2]);
    if !shared {
        assert_eq!(&a.shape()[..ar - 2], &b.shape()[..br - 2], "matmul batch dims differ");
    }
    // Shared weights with a plain A: fold the batch into rows.
    let (batch_eff, m_eff) = if shared { (1, batch * m) } else { (batch, m) };
    let bstride_b = if tb { (1, k) } else { (n, 1) };
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch_eff {
        let bo = if shared { 0 } else { bi * k * n };
        gemm(
            m_eff,
            k,
            n,
            &ad[bi * m_eff * k..],
            (k, 1),
            &bd[bo..],
            bstride_b,
            &mut out[bi * m_eff * n..],
            (n, 1),
            0.0,
        );
    }
    let mut shape = a.shape()[..ar - 2].to_vec();
    shape.extend([m, n]);
    let (aa, ba) = (a.data_arc(), b.data_arc());
    let b_len = b.numel();
    Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g, needs| {
        let mut ga = None;
        let mut gb = None;
        if needs[0] {
            let mut da = vec![0.0; batch_eff * m_eff * k];
            for bi in 0..batch_eff {
                let bo = if shared { 0 } else { bi * k * n };
                // dA = dC * op(B)^T ; op(B)^T has shape [n, k]
                let bt_strides = if tb { (k, 1) } else { (1, n) };
                gemm(m_eff, n, k, &g[bi * m_eff * n..], (n, 1), &ba[bo..], bt_strides, &mut da[bi * m_eff * k..], (k, 1), 0.0);
            }
            ga = Some(da);
        }
        if needs[1] {
            let mut db = vec![0.0; b_len];
            for bi in 0..batch_eff {
                let bo = if shared { 0 } else { bi * k * n };
                let beta = if shared && bi > 0 { 1.0 } else { 0.0 };
                if tb {
                    // dB[n, k] = dC^T * A
                    gemm(n, m_eff, k, &g[bi * m_eff * n..], (1, n), &aa[bi * m_eff * k..], (k, 1), &mut db[bo..], (k, 1), beta);
                } else {
                    // dB[k, n] = A^T * dC
                    gemm(k, m_eff, n, &aa[bi * m_eff * k..], (1, k), &g[bi * m_eff * n..], (n, 1), &mut db[bo..], (n, 1), beta);
                }
            }
            gb = Some(db);
        }
        vec![ga, gb]
    })
}

/// Stride, zero padding and channel groups of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn im2col(&self, x: &[f64], c0: usize, cpg: usize) -> Vec<f64> {
        let hw_o = self.ho * self.wo;
        let mut col = vec![0.0; cpg * self.kh * self.kw * hw_o];
        for ci in 0..cpg {
            let plane = &x[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * hw_o;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64], c0: usize, cpg: usize) {
        let hw_o = self.ho * self.wo;
        for ci in 0..cpg {
            let plane = &mut dx[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * hw_o;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += col[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [Cin, H, W]` with `w: [Cout, Cin/groups, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    let (cin, h, wd) = x.chw();
    let [cout, cpg, kh, kw] = *w.shape() else {
        panic!("conv weight must be 4-D, got {:?}", w.shape());
    };
    let g = spec.groups;
    assert!(g >= 1 && cin % g == 0 && cout % g == 0, "bad groups {g} for {cin}->{cout}");
    assert_eq!(cpg, cin / g, "conv weight {:?} does not match {cin} input channels / {g} groups", w.shape());
    assert!(h + 2 * spec.padding >= kh && wd + 2 * spec.padding >= kw, "conv kernel larger than input");
    let geo = Arc::new(Geometry {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
        wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
    });
    let y = if g == cin && cpg == 1 && cout == cin {
        depthwise(x, w, geo)
    } else {
        grouped(x, w, geo, g, cout)
    };
    match bias {
        Some(b) => {
            assert_eq!(b.shape(), [cout]);
            y.add(&b.reshape(&[cout, 1, 1]))
        }
        None => y,
    }
}

fn grouped(x: &Tensor, w: &Tensor, geo: Arc<Geometry>, g: usize, cout: usize) -> Tensor {
    let cpg = geo.cin / g;
    let opg = cout / g;
    let kdim = cpg * geo.kh * geo.kw;
    let hw_o = geo.ho * geo.wo;
    let pointwise = geo.kh == 1 && geo.kw == 1 && geo.stride == 1 && geo.pad == 0;
    let xd = x.data();
    let wd = w.data();
    let cols: Vec<Vec<f64>> = if pointwise {
        Vec::new()
    } else {
        (0..g).map(|gi| geo.im2col(xd, gi * cpg, cpg)).collect()
    };
    let mut out = vec![0.0; cout * hw_o];
    for gi in 0..g {
        let col: &[f64] = if pointwise { &xd[gi * cpg * hw_o..] } else { &cols[gi] };
        gemm(opg, kdim, hw_o, &wd[gi * opg * kdim..], (kdim, 1), col, (hw_o, 1), &mut out[gi * opg * hw_o..], (hw_o, 1), 0.0);
    }
    let (xa, wa) = (x.data_arc(), w.data_arc());
    let cols = Arc::new(cols);
    let shape = vec![cout, geo.ho, geo.wo];
    Tensor::from_op(out, shape, vec![x.clone(), w.clone()], move |gout, needs| {
        let mut gx = needs[0].then(|| vec![0.0; geo.cin * geo.h * geo.w]);
        let mut gw = needs[1].then(|| vec![0.0; cout * kdim]);
        for gi in 0..g {
            let go = &gout[gi * opg * hw_o..(gi + 1) * opg * hw_o];
            if let Some(gw) = gw.as_mut() {
                let col: &[f64] = if pointwise { &xa[gi * cpg * hw_o..] } else { &cols[gi] };
                // dW = dY * col^T
                gemm(opg, hw_o, kdim, go, (hw_o, 1), col, (1, hw_o), &mut gw[gi * opg * kdim..], (kdim, 1), 0.0);
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &wa[gi * opg * kdim..];
                if pointwise {
                    gemm(kdim, opg, hw_o, wg, (1, kdim), go, (hw_o, 1), &mut gx[gi * cpg * hw_o..], (hw_o, 1), 0.0);
                } else {
                    let mut dcol = vec![0.0; kdim * hw_o];
                    gemm(kdim, opg, hw_o, wg, (1, kdim), go, (hw_o, 1), &mut dcol, (hw_o, 1), 0.0);
                    geo.col2im(&dcol, gx, gi * cpg, cpg);
                }
            }
        }
        vec![gx, gw]
    })
}

fn depthwise(x: &Tensor, w: &Tensor, geo: Arc<Geometry>) -> Tensor {
    let c = geo.cin;
    let (h, wd, ho, wo, kh, kw, s, p) = (geo.h, geo.w, geo.ho, geo.wo, geo.kh, geo.kw, geo.stride, geo.pad as isize);
    let xd = x.data();
    let wt = w.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &xd[ch * h * wd..(ch + 1) * h * wd];
        let k = &wt[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < wd as isize {
                            acc += k[ky * kw + kx] * plane[iy as usize * wd + ix as usize];
                        }
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc;
            }
        }
    }
    let (xa, wa) = (x.data_arc(), w.data_arc());
    Tensor::from_op(out, vec![c, ho, wo], vec![x.clone(), w.clone()], move |g, needs| {
        let mut gx = needs[0].then(|| vec![0.0; c * h * wd]);
        let mut gw = needs[1].then(|| vec![0.0; c * kh * kw]);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[(ch * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < wd as isize {
                                let xi = ch * h * wd + iy as usize * wd + ix as usize;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += gv * wa[ch * kh * kw + ky * kw + kx];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[ch * kh * kw + ky * kw + kx] += gv * xa[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![gx, gw]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct-loop convolution used as the oracle.
    fn conv_ref(x: &[f64], (c, h, w): (usize, usize, usize), k: &[f64], (co, kh, kw): (usize, usize, usize), spec: Conv2dSpec) -> Vec<f64> {
        let cpg = c / spec.groups;
        let opg = co / spec.groups;
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let gi = o / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += k[((o * cpg + ci) * kh + ky) * kw + kx]
                                        * x[(gi * cpg + ci) * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn check_conv(c: usize, h: usize, w: usize, co: usize, k: usize, spec: Conv2dSpec) {
        let xv = vals(c * h * w, 3);
        let kv = vals(co * (c / spec.groups) * k * k, 5);
        let x = Tensor::param(xv.clone(), &[c, h, w]);
        let kt = Tensor::param(kv.clone(), &[co, c / spec.groups, k, k]);
        let y = conv2d(&x, &kt, None, spec);
        let r = conv_ref(&xv, (c, h, w), &kv, (co, k, k), spec);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
        // gradient of a weighted sum against finite differences
        let wgt = Tensor::new(vals(y.numel(), 11), y.shape());
        let grads = y.mul(&wgt).sum_all().backward();
        let f = |xv: &[f64], kv: &[f64]| -> f64 {
            conv_ref(xv, (c, h, w), kv, (co, k, k), spec).iter().zip(wgt.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        let gx = grads.get(&x).unwrap();
        for i in (0..xv.len()).step_by(3) {
            let (mut p, mut m) = (xv.clone(), xv.clone());
            p[i] += eps;
            m[i] -= eps;
            let num = (f(&p, &kv) - f(&m, &kv)) / (2.0 * eps);
            assert!((num - gx[i]).abs() < 1e-6, "dx[{i}] {num} vs {}", gx[i]);
        }
        let gk = grads.get(&kt).unwrap();
        for i in 0..kv.len() {
            let (mut p, mut m) = (kv.clone(), kv.clone());
            p[i] += eps;
            m[i] -= eps;
            let num = (f(&xv, &p) - f(&xv, &m)) / (2.0 * eps);
            assert!((num - gk[i]).abs() < 1e-6, "dk[{i}] {num} vs {}", gk[i]);
        }
    }

    #[test]
    fn conv_variants_match_direct_loops() {
        check_conv(3, 7, 6, 4, 3, Conv2dSpec { stride: 1, padding: 1, groups: 1 });
        check_conv(2, 8, 8, 4, 5, Conv2dSpec { stride: 2, padding: 2, groups: 1 });
        check_conv(4, 5, 5, 6, 1, Conv2dSpec::default());
        check_conv(4, 6, 6, 4, 3, Conv2dSpec { stride: 1, padding: 1, groups: 4 });
        check_conv(4, 6, 6, 4, 3, Conv2dSpec { stride: 2, padding: 1, groups: 2 });
    }

    #[test]
    fn matmul_variants_and_grads() {
        let a = Tensor::param(vals(2 * 3 * 4, 1), &[2, 3, 4]);
        let b = Tensor::param(vals(2 * 4 * 5, 2), &[2, 4, 5]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), [2, 3, 5]);
        let direct = |ad: &[f64], bd: &[f64], bi: usize, i: usize, j: usize| -> f64 {
            (0..4).map(|t| ad[bi * 12 + i * 4 + t] * bd[bi * 20 + t * 5 + j]).sum()
        };
        assert!((c.data()[15 + 5 + 2] - direct(a.data(), b.data(), 1, 1, 2)).abs() < 1e-12);

        let bt = Tensor::param(vals(2 * 5 * 4, 3), &[2, 5, 4]);
        let w = Tensor::param(vals(4 * 5, 4), &[4, 5]);
        for f in [
            Box::new(|a: &Tensor, b: &Tensor, _: &Tensor, _: &Tensor| a.matmul(b)) as Box<dyn Fn(&Tensor, &Tensor, &Tensor, &Tensor) -> Tensor>,
            Box::new(|a: &Tensor, _: &Tensor, bt: &Tensor, _: &Tensor| a.matmul_t(bt)),
            Box::new(|a: &Tensor, _: &Tensor, _: &Tensor, w: &Tensor| a.matmul(w)),
        ] {
            let wgt = Tensor::new(vals(30, 9), &[2, 3, 5]);
            let grads = f(&a, &b, &bt, &w).mul(&wgt).sum_all().backward();
            for t in [&a, &b, &bt, &w] {
                let Some(gt) = grads.get(t) else { continue };
                let base = t.to_vec();
                for i in 0..base.len() {
                    let eval = |d: f64| {
                        let mut v = base.clone();
                        v[i] += d;
                        let tt = Tensor::new(v, t.shape());
                        let pick = |x: &Tensor| if x.id() == t.id() { tt.clone() } else { x.detach() };
                        f(&pick(&a), &pick(&b), &pick(&bt), &pick(&w)).mul(&wgt).sum_all().item()
                    };
                    let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    assert!((num - gt[i]).abs() < 1e-6);
                }
            }
        }
    }
}
