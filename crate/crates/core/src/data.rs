//! Deterministic synthetic sequences for tests, training smoke runs and benches.

use rand::Rng;

use crate::frame::PixelFrame;
use crate::nn::stream_rng;

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    radius: f64,
    colour: [f64; 3],
}

/// A textured background panning at a constant sub-pixel velocity with two
/// soft discs moving independently on top. Values sit on the 8-bit grid so
/// lossless intra coding is exact.
pub fn moving_texture(width: usize, height: usize, frames: usize, seed: u64) -> Vec<PixelFrame> {
    let mut rng = stream_rng(seed, "moving_texture");
    let tau = std::f64::consts::TAU;
    let gratings: Vec<Grating> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..tau);
            let freq = rng.random_range(0.03..0.12);
            Grating {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.random_range(0.0..tau),
                amp: std::array::from_fn(|_| rng.random_range(0.05..0.15)),
            }
        })
        .collect();
    let pan = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let blobs: Vec<Blob> = (0..2)
        .map(|_| Blob {
            cx: rng.random_range(0.2..0.8) * width as f64,
            cy: rng.random_range(0.2..0.8) * height as f64,
            vx: rng.random_range(-2.0..2.0),
            vy: rng.random_range(-2.0..2.0),
            radius: rng.random_range(0.08..0.18) * width.min(height) as f64,
            colour: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
        })
        .collect();
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let mut data = vec![0.0; 3 * width * height];
            for y in 0..height {
                for x in 0..width {
                    let (bx, by) = (x as f64 - pan.0 * t, y as f64 - pan.1 * t);
                    let mut px = [0.5; 3];
                    for g in &gratings {
                        let s = (tau * (g.fx * bx + g.fy * by) + g.phase).sin();
                        for (c, v) in px.iter_mut().enumerate() {
                            *v += g.amp[c] * s;
                        }
                    }
                    for b in &blobs {
                        let d = ((x as f64 - b.cx - b.vx * t).powi(2) + (y as f64 - b.cy - b.vy * t).powi(2)).sqrt();
                        let alpha = (b.radius - d).clamp(0.0, 1.5) / 1.5;
                        for (c, v) in px.iter_mut().enumerate() {
                            *v = *v * (1.0 - alpha) + b.colour[c] * alpha;
                        }
                    }
                    for (c, v) in px.iter().enumerate() {
                        data[(c * height + y) * width + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    }
                }
            }
            PixelFrame::new(width, height, data).expect("synthetic frame in range")
        })
        .collect()
}
