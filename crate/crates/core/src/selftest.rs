//! Quick consistency checks of the fast kernels against the loop oracles,
//! runnable from the command line.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{PriorLogits, WindowAttention};
use crate::codec::{decode_sequence, encode_sequence, EntropyTables, Model, SequenceParams, VerbatimIntra};
use crate::config::ModelConfig;
use crate::entropy::{range_decode, range_encode, CdfTable, GaussianTables, NUM_SYMBOLS};
use crate::eval::{bd_rate, RdCurve, RdPoint};
use crate::nn::{stream_rng, ParamBuilder, Params};
use crate::oracle::{self, rel_err, AttentionWeights};
use crate::tensor::{deform_conv2d, no_grad, Tensor};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, limit: f64) -> Check {
    Check {
        name,
        passed: worst.is_finite() && worst <= limit,
        detail: format!("worst {worst:.3e} (limit {limit:.0e})"),
    }
}

fn noise(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn range_coder() -> Check {
    let mut rng = stream_rng(1, "selftest-range");
    let mut failures = 0;
    for case in 0..200 {
        let n = rng.random_range(1..400);
        let sigma = rng.random_range(0.2..30.0);
        let dist = Normal::new(0.0, sigma).expect("positive sigma");
        let symbols: Vec<i32> = (0..n).map(|_| (dist.sample(&mut rng) as i32).clamp(-255, 255)).collect();
        let ok = if case % 2 == 0 {
            let probs: Vec<f64> = (0..NUM_SYMBOLS).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = CdfTable::from_probs(&probs);
            range_decode(&range_encode(&symbols, &t), &t, n).ok() == Some(symbols)
        } else {
            let t = GaussianTables::new(vec![0.0; n], (0..n).map(|_| rng.random_range(0.05..40.0)).collect());
            range_decode(&range_encode(&symbols, &t), &t, n).ok() == Some(symbols)
        };
        failures += usize::from(!ok);
    }
    Check {
        name: "range coder round trips",
        passed: failures == 0,
        detail: format!("{failures} of 200 failed"),
    }
}

fn deformable() -> Vec<Check> {
    let mut rng = stream_rng(2, "selftest-deform");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, h, w, g, co) = (4, rng.random_range(3..7), rng.random_range(3..7), 2, 3);
        let x = noise(&mut rng, c * h * w, 1.0);
        let off = noise(&mut rng, g * 18 * h * w, 2.0);
        let mask = noise(&mut rng, g * 9 * h * w, 1.0);
        let wt = noise(&mut rng, co * c * 9, 0.5);
        let b = noise(&mut rng, co, 0.5);
        let y = no_grad(|| {
            deform_conv2d(
                &Tensor::new(x.clone(), &[c, h, w]),
                &Tensor::new(off.clone(), &[g * 18, h, w]),
                &Tensor::new(mask.clone(), &[g * 9, h, w]),
                &Tensor::new(wt.clone(), &[co, c * 9]),
                Some(&Tensor::new(b.clone(), &[co])),
                g,
            )
        });
        let expect = oracle::deform_conv(&x, c, h, w, &off, &mask, &wt, &b, g);
        for (a, e) in y.data().iter().zip(&expect) {
            worst = worst.max(rel_err(*a, *e, 1e-6));
        }
    }
    let (c, h, w) = (2, 4, 4);
    let x = Tensor::new(noise(&mut rng, c * h * w, 1.0), &[c, h, w]);
    let off = Tensor::param(noise(&mut rng, 18 * h * w, 1.5), &[18, h, w]);
    let mask = Tensor::param(noise(&mut rng, 9 * h * w, 1.0), &[9, h, w]);
    let wt = Tensor::new(noise(&mut rng, 2 * c * 9, 0.5), &[2, c * 9]);
    let f = |o: &Tensor, m: &Tensor| deform_conv2d(&x, o, m, &wt, None, 1).square().sum_all();
    let grads = f(&off, &mask).backward();
    let mut grad_worst = 0.0f64;
    for (which, t) in [&off, &mask].into_iter().enumerate() {
        let g = grads.get_or_zeros(t);
        let mut v = t.to_vec();
        for i in (0..v.len()).step_by(11) {
            let fd = oracle::finite_difference(&mut v, i, 1e-6, |v| {
                let moved = Tensor::new(v.to_vec(), t.shape());
                if which == 0 { f(&moved, &mask) } else { f(&off, &moved) }.item()
            });
            grad_worst = grad_worst.max(rel_err(g[i], fd, 1e-6));
        }
    }
    vec![
        check("deformable conv vs gather loop", worst, 1e-5),
        check("deformable offset/mask gradients", grad_worst, 1e-3),
    ]
}

fn attention() -> Check {
    let mut worst = 0.0f64;
    for (seed, (dim, heads, w)) in [(8, 2, 4), (6, 3, 2), (8, 4, 8)].into_iter().enumerate() {
        let mut p = Params::default();
        let a = WindowAttention::new(&mut ParamBuilder::new(&mut p, seed as u64), "a", dim, heads);
        let mut rng = stream_rng(seed as u64, "selftest-attn");
        let nb = p.get(a.rel_bias).numel();
        p.set(a.rel_bias, noise(&mut rng, nb, 0.3));
        let n = w * w;
        let x = Tensor::new(noise(&mut rng, n * dim, 1.0), &[1, n, dim]);
        let qp = Tensor::new(noise(&mut rng, n * dim, 1.0), &[1, n, dim]);
        let kp = Tensor::new(noise(&mut rng, n * dim, 1.0), &[1, n, dim]);
        let m = Tensor::new(noise(&mut rng, heads, 1.0), &[heads]);
        let aw = AttentionWeights::from_params(&p, &a);
        let (plain, prior) = no_grad(|| {
            (
                a.forward(&p, &x, w, None),
                a.forward(&p, &x, w, Some(PriorLogits { q: &qp, k: &kp, modulator: &m })),
            )
        });
        let e_plain = oracle::window_attention(&aw, x.data(), w, None);
        let e_prior = oracle::window_attention(&aw, x.data(), w, Some((qp.data(), kp.data(), m.data())));
        for (got, exp) in [(plain, e_plain), (prior, e_prior)] {
            for (g, e) in got.data().iter().zip(&exp) {
                worst = worst.max(rel_err(*g, *e, 1e-6));
            }
        }
    }
    check("window attention vs softmax loop", worst, 1e-5)
}

fn bd_rate_reference() -> Check {
    let curve = |r: [f64; 4], q: [f64; 4]| RdCurve::new(r.iter().zip(q).map(|(&rate, quality)| RdPoint { rate, quality }).collect());
    let run = || -> crate::Result<f64> {
        let anchor = curve([0.05, 0.10, 0.20, 0.40], [30.1, 32.6, 35.0, 37.2])?;
        let test = curve([0.045, 0.085, 0.175, 0.36], [30.4, 32.9, 35.1, 37.6])?;
        let shifted = curve([0.055, 0.11, 0.22, 0.44], [30.1, 32.6, 35.0, 37.2])?;
        let a = (bd_rate(&test, &anchor)? - -18.68665064774746).abs();
        let b = (bd_rate(&shifted, &anchor)? - 10.0).abs();
        let c = bd_rate(&anchor, &anchor)?.abs();
        Ok(a.max(b).max(c))
    };
    check("bd-rate reference values", run().unwrap_or(f64::INFINITY), 0.01)
}

fn extractor_gradient() -> Check {
    let mut p = Params::default();
    let m = match Model::new(&mut p, ModelConfig::toy(), 4) {
        Ok(m) => m,
        Err(e) => {
            return Check {
                name: "feature extractor gradient",
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let mut rng = stream_rng(4, "selftest-grad");
    let x = Tensor::new((0..3 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect(), &[3, 16, 16]);
    let loss = |p: &Params| m.extractor.extract_features(p, &x).map(|f| f.sum_all());
    let mut worst = 0.0f64;
    let Ok(l) = loss(&p) else {
        return check("feature extractor gradient", f64::INFINITY, 1e-3);
    };
    let grads = l.backward();
    for (id, name, t) in p.iter().filter(|(_, n, _)| n.starts_with("extract")) {
        let _ = name;
        let g = grads.get_or_zeros(t);
        let mut v = t.to_vec();
        let stride = (v.len() / 5).max(1);
        for i in (0..v.len()).step_by(stride) {
            let fd = oracle::finite_difference(&mut v, i, 1e-6, |v| {
                let mut q = p.clone();
                q.set(id, v.to_vec());
                loss(&q).map(|l| l.item()).unwrap_or(f64::NAN)
            });
            worst = worst.max(rel_err(g[i], fd, 1e-4));
        }
    }
    check("feature extractor gradient", worst, 1e-3)
}

fn lockstep() -> Check {
    let run = || -> crate::Result<bool> {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 6)?;
        let t = EntropyTables::freeze(&m, &p);
        let frames = crate::data::moving_texture(64, 64, 5, 6);
        let sp = SequenceParams {
            intra_period: 4,
            ..SequenceParams::new(512.0)
        };
        let enc = encode_sequence(&m, &p, &t, &frames, &sp, &VerbatimIntra)?;
        let parsed = crate::bitstream::Container::from_bytes(&enc.container.to_bytes())?;
        let dec = decode_sequence(&m, &p, &t, &parsed, &m.cfg.hash_with_lambda(512.0), sp.gop_refs, &VerbatimIntra)?;
        Ok(dec == enc.recon)
    };
    match run() {
        Ok(ok) => Check {
            name: "encoder/decoder lockstep",
            passed: ok,
            detail: if ok { "bitwise equal".into() } else { "reconstructions differ".into() },
        },
        Err(e) => Check {
            name: "encoder/decoder lockstep",
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check; the caller decides how to report failures.
pub fn run_all() -> Vec<Check> {
    let mut out = vec![range_coder()];
    out.extend(deformable());
    out.push(attention());
    out.push(bd_rate_reference());
    out.push(extractor_gradient());
    out.push(lockstep());
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
