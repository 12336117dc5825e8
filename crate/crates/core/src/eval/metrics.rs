//! Frame quality metrics. MS-SSIM follows the common TensorFlow formulation
//! (Gaussian 11x11 window, sigma 1.5, valid filtering, symmetric padding
//! before 2x2 average pooling at odd sizes) and is differentiable.

use crate::error::{Error, Result};
use crate::frame::PixelFrame;
use crate::tensor::{conv2d, Conv2dSpec, Tensor};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const FILTER: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &PixelFrame, b: &PixelFrame) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &PixelFrame, b: &PixelFrame) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over RGB in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &PixelFrame, b: &PixelFrame) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Normalized 2-D Gaussian as a depthwise weight `[3, 1, k, k]`.
fn gaussian_window(k: usize) -> Tensor {
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k).map(|i| (-0.5 * ((i as f64 - c) / SIGMA).powi(2)).exp()).collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Tensor::new(w.repeat(3), &[3, 1, k, k])
}

fn blur(x: &Tensor, window: &Tensor) -> Tensor {
    conv2d(
        x,
        window,
        None,
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 3,
        },
    )
}

fn channel_means(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    x.reshape(&[c, h * w]).mean_axis(1)
}

/// Per-channel `(ssim, cs)` at one scale. The window shrinks to the image
/// when a scale is smaller than 11 pixels.
fn ssim_terms(x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let (_, h, w) = x.chw();
    let window = gaussian_window(FILTER.min(h).min(w));
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (mx, my) = (blur(x, &window), blur(y, &window));
    let num0 = mx.mul(&my).mul_scalar(2.0);
    let den0 = mx.square().add(&my.square());
    let luminance = num0.add_scalar(c1).div(&den0.add_scalar(c1));
    let num1 = blur(&x.mul(y), &window).mul_scalar(2.0);
    let den1 = blur(&x.square().add(&y.square()), &window);
    let cs = num1.sub(&num0).add_scalar(c2).div(&den1.sub(&den0).add_scalar(c2));
    (channel_means(&luminance.mul(&cs)), channel_means(&cs))
}

/// Symmetric pad to even sides, then 2x2 average pooling.
fn downsample(x: &Tensor) -> Tensor {
    let (_, h, w) = x.chw();
    let mut t = x.clone();
    if h % 2 == 1 {
        t = Tensor::concat(&[&t, &t.narrow(1, h - 1, 1)], 1);
    }
    if w % 2 == 1 {
        t = Tensor::concat(&[&t, &t.narrow(2, w - 1, 1)], 2);
    }
    t.avg_pool(2)
}

/// Five-scale MS-SSIM of `[3, H, W]` tensors in `[0, 1]`: the per-channel
/// weighted product over scales, averaged over channels.
pub fn ms_ssim_tensor(x: &Tensor, y: &Tensor) -> Tensor {
    assert_eq!(x.shape(), y.shape(), "ms-ssim operands differ in shape");
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut log_sum = Tensor::zeros(&[3]);
    for (i, wgt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&a, &b);
        let term = if i + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
        log_sum = log_sum.add(&term.clamp(1e-12, f64::INFINITY).ln().mul_scalar(*wgt));
        if i + 1 < MS_SSIM_WEIGHTS.len() {
            a = downsample(&a);
            b = downsample(&b);
        }
    }
    log_sum.exp().mean_all()
}

pub fn ms_ssim(a: &PixelFrame, b: &PixelFrame) -> Result<f64> {
    same_shape(a, b)?;
    if a.width() < 16 || a.height() < 16 {
        return Err(Error::Shape("ms-ssim needs frames of at least 16x16".into()));
    }
    Ok(crate::tensor::no_grad(|| ms_ssim_tensor(&a.to_tensor(), &b.to_tensor())).item())
}
