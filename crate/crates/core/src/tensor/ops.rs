use super::{numel, Tensor};

/// Numpy-style broadcast of two shapes aligned on trailing axes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} do not broadcast"
        );
        out[i] = da.max(db);
    }
    out
}

/// Element strides of `shape` when viewed as `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index with the matching input offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        // increment multi-index
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary<F, DA, DB>(a: &Tensor, b: &Tensor, f: F, da: DA, db: DB) -> Tensor
where
    F: Fn(f64, f64) -> f64,
    DA: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    DB: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    if a.shape() == b.shape() {
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let (ad, bd) = (a.data_arc(), b.data_arc());
        return Tensor::from_op(out, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(ad.iter().zip(bd.iter())).map(|(g, (&x, &y))| g * da(x, y)).collect());
            let gb = needs[1].then(|| g.iter().zip(ad.iter().zip(bd.iter())).map(|(g, (&x, &y))| g * db(x, y)).collect());
            vec![ga, gb]
        });
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![0.0; numel(&out_shape)];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(ad[ia], bd[ib]));
    }
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let (na, nb) = (a.numel(), b.numel());
    let os = out_shape.clone();
    Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], move |g, needs| {
        let mut ga = needs[0].then(|| vec![0.0; na]);
        let mut gb = needs[1].then(|| vec![0.0; nb]);
        for_each_broadcast(&os, &sa, &sb, |i, ia, ib| {
            if let Some(ga) = ga.as_mut() {
                ga[ia] += g[i] * da(ad[ia], bd[ib]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += g[i] * db(ad[ia], bd[ib]);
            }
        });
        vec![ga, gb]
    })
}

fn unary<F, D>(x: &Tensor, f: F, df: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xd = x.data_arc();
    let yd = std::sync::Arc::new(out.clone());
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g, _| {
        vec![Some(g.iter().zip(xd.iter().zip(yd.iter())).map(|(g, (&x, &y))| g * df(x, y)).collect())]
    })
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        unary(self, |x| x * normal_cdf(x), |x, _| normal_cdf(x) + x * normal_pdf(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn softplus(&self) -> Tensor {
        unary(
            self,
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(self, move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    /// `max(x, lo)` with gradient passing only above the bound.
    pub fn lower_bound(&self, lo: f64) -> Tensor {
        unary(self, move |x| x.max(lo), move |x, _| if x >= lo { 1.0 } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    /// `max(x, lo)` whose gradient also passes below the bound when it
    /// would push the value back up, so clamped entries can recover.
    pub fn bound_below(&self, lo: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(lo)).collect();
        let xd = self.data_arc();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(xd.iter())
                    .map(|(&g, &x)| if x >= lo || g < 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// Elementwise standard normal CDF.
    pub fn normal_cdf(&self) -> Tensor {
        unary(self, normal_cdf, |x, _| normal_pdf(x))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let s = self.shape();
        assert!(axis < s.len(), "axis {axis} out of range for {s:?}");
        (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, n, inner) = self.axis_split(axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(1.0 / n as f64)
    }

    /// Maximum over `axis`, removing it. The gradient routes to the first
    /// maximal element.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let (outer, n, inner) = self.axis_split(axis);
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = k;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    gx[(o * n + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().expect("softmax on scalar");
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        let y = std::sync::Arc::new(out.clone());
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`
    /// (both of the last axis' length).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let n = *self.shape().last().expect("layer_norm on scalar");
        assert_eq!(gamma.shape(), [n]);
        assert_eq!(beta.shape(), [n]);
        let x = self.data();
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (d, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *d = (v - mean) * rs;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| h * gd[i % n] + bd[i % n]).collect();
        let gamma_arc = gamma.data_arc();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone(), gamma.clone(), beta.clone()], move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; g.len()]);
            let mut gg = needs[1].then(|| vec![0.0; n]);
            let mut gb = needs[2].then(|| vec![0.0; n]);
            for r in 0..rows {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                if let Some(gg) = gg.as_mut() {
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for j in 0..n {
                        gb[j] += gr[j];
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gamma_arc[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gamma_arc[j];
                        gx[r * n + j] = rstd[r] * (dh - inv_n * s1 - hr[j] * inv_n * s2);
                    }
                }
            }
            vec![gx, gg, gb]
        })
    }
}
