use std::sync::Arc;

use super::{numel, Tensor};

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For each destination element, the source offset under `perm`.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "cannot reshape {:?} to {shape:?}", self.shape());
        Tensor::from_op_shared(self.data_arc(), shape.to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())])
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank(), "permutation rank mismatch");
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let (out_shape, map) = permute_map(self.shape(), perm);
        let x = self.data();
        let out: Vec<f64> = map.iter().map(|&o| x[o]).collect();
        let map = Arc::new(map);
        Tensor::from_op(out, out_shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (gv, &o) in g.iter().zip(map.iter()) {
                gx[o] = *gv;
            }
            vec![Some(gx)]
        })
    }

    /// 2-D transpose of the last two axes.
    pub fn transpose_last(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenates along `axis`. All other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), base.len());
            for (i, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), base);
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        Tensor::from_op(out, shape, parents, move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&sizes)
                .map(|(&n, &s)| n.then(|| Vec::with_capacity(outer * s * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &s) in grads.iter_mut().zip(&sizes) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[off..off + s * inner]);
                    }
                    off += s * inner;
                }
            }
            grads
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let s = self.shape();
        assert!(start + len <= s[axis], "narrow out of range");
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let n = s[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let total = self.numel();
        Tensor::from_op(out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; total];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Gathers along the last axis: `out[..., j] = self[..., index[j]]`.
    pub fn gather_last(&self, index: Arc<Vec<usize>>) -> Tensor {
        let n = *self.shape().last().expect("gather on scalar");
        let rows = self.numel() / n;
        let m = index.len();
        let x = self.data();
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            out.extend(index.iter().map(|&j| x[r * n + j]));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        Tensor::from_op(out, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; rows * n];
            for r in 0..rows {
                for (k, &j) in index.iter().enumerate() {
                    gx[r * n + j] += g[r * m + k];
                }
            }
            vec![Some(gx)]
        })
    }

    /// `[C, H, W] -> [C*r*r, H/r, W/r]`, channel-major over the `r x r` phase.
    pub fn pixel_unshuffle(&self, r: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle: {h}x{w} not divisible by {r}");
        self.reshape(&[c, h / r, r, w / r, r])
            .permute(&[0, 2, 4, 1, 3])
            .reshape(&[c * r * r, h / r, w / r])
    }

    /// Inverse of [`Tensor::pixel_unshuffle`].
    pub fn pixel_shuffle(&self, r: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(c % (r * r) == 0, "pixel_shuffle: {c} channels not divisible by {}", r * r);
        let oc = c / (r * r);
        self.reshape(&[oc, r, r, h, w])
            .permute(&[0, 3, 1, 4, 2])
            .reshape(&[oc, h * r, w * r])
    }

    /// `k x k` average pooling with stride `k` on `[C, H, W]`.
    pub fn avg_pool(&self, k: usize) -> Tensor {
        let (c, h, w) = self.chw();
        self.pixel_unshuffle(k).reshape(&[c, k * k, h / k, w / k]).mean_axis(1)
    }

    /// Nearest-neighbour upsampling by `k` on `[C, H, W]`.
    pub fn upsample_nearest(&self, k: usize) -> Tensor {
        let (c, h, w) = self.chw();
        self.reshape(&[c, h, 1, w, 1])
            .mul(&Tensor::ones(&[1, 1, k, 1, k]))
            .reshape(&[c, h * k, w * k])
    }

    /// Crop of a `[C, H, W]` map.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Tensor {
        self.narrow(1, top, h).narrow(2, left, w)
    }

    /// `[C, H, W]` dims; panics for other ranks.
    pub fn chw(&self) -> (usize, usize, usize) {
        match *self.shape() {
            [c, h, w] => (c, h, w),
            ref s => panic!("expected a [C, H, W] tensor, got {s:?}"),
        }
    }

    /// `[C, H, W] -> [H*W, C]` token matrix.
    pub fn to_tokens(&self) -> Tensor {
        let (c, h, w) = self.chw();
        self.reshape(&[c, h * w]).transpose_last()
    }

    /// `[H*W, C] -> [C, H, W]`.
    pub fn from_tokens(&self, h: usize, w: usize) -> Tensor {
        let c = self.shape()[1];
        assert_eq!(self.shape()[0], h * w);
        self.transpose_last().reshape(&[c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn permute_matches_manual() {
        let x = Tensor::new(seq(24), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), [4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn shuffle_roundtrip() {
        let x = Tensor::new(seq(2 * 4 * 6), &[2, 4, 6]);
        let u = x.pixel_unshuffle(2);
        assert_eq!(u.shape(), [8, 2, 3]);
        assert_eq!(u.pixel_shuffle(2).data(), x.data());
        // phase (0,1) of channel 0 holds x[0, 2i, 2j+1]
        assert_eq!(u.data()[6], x.data()[1]);
    }

    #[test]
    fn concat_narrow_grads_route() {
        let a = Tensor::param(seq(6), &[2, 3]);
        let b = Tensor::param(seq(4), &[2, 2]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), [2, 5]);
        assert_eq!(c.data(), [0., 1., 2., 0., 1., 3., 4., 5., 2., 3.]);
        let w = Tensor::new(seq(10), &[2, 5]);
        let g = c.mul(&w).sum_all().backward();
        assert_eq!(g.get(&a).unwrap(), [0., 1., 2., 5., 6., 7.]);
        assert_eq!(g.get(&b).unwrap(), [3., 4., 8., 9.]);
        let n = c.narrow(1, 2, 2);
        assert_eq!(n.data(), [2., 0., 5., 2.]);
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor::new(seq(16), &[1, 4, 4]);
        let p = x.avg_pool(2);
        assert_eq!(p.data(), [2.5, 4.5, 10.5, 12.5]);
        let u = p.upsample_nearest(2);
        assert_eq!(u.shape(), [1, 4, 4]);
        assert_eq!(u.data()[0..4], [2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn gather_accumulates() {
        let t = Tensor::param(vec![1.0, 2.0, 3.0], &[3]);
        let g = t.gather_last(Arc::new(vec![2, 0, 2])).sum_all().backward();
        assert_eq!(g.get(&t).unwrap(), [1.0, 0.0, 2.0]);
    }
}
