//! Modulated deformable 3x3 convolution (stride 1, padding 1) with a fused,
//! hand-written backward pass.

use std::sync::Arc;

use super::Tensor;

pub const TAPS: usize = 9;

/// Bilinear footprint of one sampling location.
#[derive(Clone, Copy)]
struct Sample {
    idx: [usize; 4],
    ly: f64,
    lx: f64,
    /// 1 when the unclamped coordinate lies inside the plane, else 0
    /// (clamping kills the coordinate gradient).
    gy: f64,
    gx: f64,
}

impl Sample {
    fn new(h: usize, w: usize, y: f64, x: f64) -> Self {
        let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
        let gy = if (0.0..=ymax).contains(&y) { 1.0 } else { 0.0 };
        let gx = if (0.0..=xmax).contains(&x) { 1.0 } else { 0.0 };
        let y = y.clamp(0.0, ymax);
        let x = x.clamp(0.0, xmax);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            ly: y - y0 as f64,
            lx: x - x0 as f64,
            gy,
            gx,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx]
    }

    fn value(&self, plane: &[f64]) -> f64 {
        let w = self.weights();
        (0..4).map(|i| w[i] * plane[self.idx[i]]).sum()
    }

    /// `(d value / d y, d value / d x)`.
    fn grad(&self, plane: &[f64]) -> (f64, f64) {
        let v = self.idx.map(|i| plane[i]);
        let dy = (1.0 - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (1.0 - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy * self.gy, dx * self.gx)
    }
}

fn geometry(h: usize, w: usize, groups: usize, offsets: &[f64]) -> Vec<Sample> {
    let hw = h * w;
    let mut out = Vec::with_capacity(groups * TAPS * hw);
    for g in 0..groups {
        for k in 0..TAPS {
            let t = g * TAPS + k;
            let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
            for pos in 0..hw {
                let y = (pos / w) as f64 + ky + offsets[2 * t * hw + pos];
                let x = (pos % w) as f64 + kx + offsets[(2 * t + 1) * hw + pos];
                out.push(Sample::new(h, w, y, x));
            }
        }
    }
    out
}

/// `x: [C, H, W]`, `offsets: [G*9*2, H, W]` as `(dy, dx)` per tap in raster
/// tap order, `mask: [G*9, H, W]`, `weight: [Co, C*9]`, `bias: [Co]`.
/// Sampling outside the plane clamps to the border.
pub fn deform_conv2d(x: &Tensor, offsets: &Tensor, mask: &Tensor, weight: &Tensor, bias: Option<&Tensor>, groups: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let hw = h * w;
    assert!(groups > 0 && c % groups == 0, "{c} channels not divisible by {groups} groups");
    assert_eq!(offsets.shape(), [groups * TAPS * 2, h, w], "offset shape");
    assert_eq!(mask.shape(), [groups * TAPS, h, w], "mask shape");
    assert_eq!(weight.rank(), 2);
    assert_eq!(weight.dim(1), c * TAPS, "weight shape");
    let co = weight.dim(0);
    if let Some(b) = bias {
        assert_eq!(b.shape(), [co]);
    }
    let cpg = c / groups;
    let geo = Arc::new(geometry(h, w, groups, offsets.data()));
    let xd = x.data_arc();
    let md = mask.data_arc();
    let wd = weight.data_arc();

    // col[(ci*9 + k), pos] = mask * sample
    let mut col = vec![0.0; c * TAPS * hw];
    for ci in 0..c {
        let plane = &xd[ci * hw..(ci + 1) * hw];
        let g = ci / cpg;
        for k in 0..TAPS {
            let t = g * TAPS + k;
            let row = &mut col[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
            for (pos, r) in row.iter_mut().enumerate() {
                *r = md[t * hw + pos] * geo[t * hw + pos].value(plane);
            }
        }
    }
    let mut out = vec![0.0; co * hw];
    if let Some(b) = bias {
        for o in 0..co {
            out[o * hw..(o + 1) * hw].fill(b.data()[o]);
        }
    }
    super::linalg::gemm_into(co, c * TAPS, hw, &wd, &col, &mut out, 1.0);

    let col = Arc::new(col);
    let mut parents = vec![x.clone(), offsets.clone(), mask.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(out, vec![co, h, w], parents, move |gout, need| {
        let ck = c * TAPS;
        // d col = W^T g
        let mut dcol = vec![0.0; ck * hw];
        super::linalg::gemm_tn_into(ck, co, hw, &wd, gout, &mut dcol);
        let gw = need[3].then(|| {
            let mut gw = vec![0.0; co * ck];
            super::linalg::gemm_nt_into(co, hw, ck, gout, &col, &mut gw);
            gw
        });
        let gb = (need.len() > 4 && need[4]).then(|| (0..co).map(|o| gout[o * hw..(o + 1) * hw].iter().sum()).collect());
        let mut gx = need[0].then(|| vec![0.0; c * hw]);
        let mut goff = need[1].then(|| vec![0.0; groups * TAPS * 2 * hw]);
        let mut gmask = need[2].then(|| vec![0.0; groups * TAPS * hw]);
        for ci in 0..c {
            let plane = &xd[ci * hw..(ci + 1) * hw];
            let g = ci / cpg;
            for k in 0..TAPS {
                let t = g * TAPS + k;
                let drow = &dcol[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                for pos in 0..hw {
                    let d = drow[pos];
                    if d == 0.0 {
                        continue;
                    }
                    let s = &geo[t * hw + pos];
                    let m = md[t * hw + pos];
                    if let Some(gm) = gmask.as_mut() {
                        gm[t * hw + pos] += d * s.value(plane);
                    }
                    let dv = d * m;
                    if let Some(gx) = gx.as_mut() {
                        let wts = s.weights();
                        for i in 0..4 {
                            gx[ci * hw + s.idx[i]] += dv * wts[i];
                        }
                    }
                    if let Some(go) = goff.as_mut() {
                        let (dy, dx) = s.grad(plane);
                        go[2 * t * hw + pos] += dv * dy;
                        go[(2 * t + 1) * hw + pos] += dv * dx;
                    }
                }
            }
        }
        let mut grads = vec![gx, goff, gmask, gw];
        if need.len() > 4 {
            grads.push(gb);
        }
        grads
    })
}
