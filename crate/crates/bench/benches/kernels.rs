use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sttv_bench::{clip, toy_codec};
use sttv_core::codec::{InterCodec, SequenceParams, VerbatimIntra};
use sttv_core::entropy::{range_decode, range_encode, GaussianTables};
use sttv_core::tensor::{deform_conv2d, no_grad, Tensor};

fn entropy(c: &mut Criterion) {
    let n = 10_000;
    let symbols: Vec<i32> = (0..n).map(|i| ((i * 7919) % 23) as i32 - 11).collect();
    let tables = GaussianTables::new(vec![0.0; n], (0..n).map(|i| 1.0 + (i % 9) as f64).collect());
    let bytes = range_encode(&symbols, &tables);
    c.bench_function("range_encode_10k", |b| b.iter(|| range_encode(&symbols, &tables)));
    c.bench_function("range_decode_10k", |b| b.iter(|| range_decode(&bytes, &tables, n).unwrap()));
}

fn deform(c: &mut Criterion) {
    let (ch, h, w, g) = (32, 32, 32, 4);
    let fill = |n: usize, s: f64| Tensor::new((0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * s).collect(), &[n]);
    let x = fill(ch * h * w, 1.0).reshape(&[ch, h, w]);
    let off = fill(g * 18 * h * w, 3.0).reshape(&[g * 18, h, w]);
    let mask = fill(g * 9 * h * w, 1.0).reshape(&[g * 9, h, w]);
    let wt = fill(ch * ch * 9, 0.1).reshape(&[ch, ch * 9]);
    c.bench_function("deform_conv_32x32x32", |b| b.iter(|| no_grad(|| deform_conv2d(&x, &off, &mask, &wt, None, g))));
}

fn codec(c: &mut Criterion) {
    let (m, p, t) = toy_codec(3);
    let frames = clip(64, 64, 2);
    let refs = [m.reference_feature(&p, &frames[0]).unwrap()];
    let ic = InterCodec {
        model: &m,
        params: &p,
        tables: &t,
    };
    let mut g = c.benchmark_group("toy_codec");
    g.sample_size(10);
    g.bench_function("inter_encode_64x64", |b| b.iter(|| ic.encode(&frames[1], &refs).unwrap()));
    g.bench_function("train_step_64x64", |b| {
        b.iter_batched(
            || frames[1].to_tensor(),
            |x| m.inter_forward(&p, &x, &refs, None).unwrap().x_hat.square().sum_all().backward(),
            BatchSize::SmallInput,
        )
    });
    let seq = clip(64, 64, 4);
    let sp = SequenceParams {
        intra_period: 32,
        ..SequenceParams::new(512.0)
    };
    g.bench_function("sequence_4x64x64", |b| {
        b.iter(|| sttv_core::codec::encode_sequence(&m, &p, &t, &seq, &sp, &VerbatimIntra).unwrap())
    });
    g.finish();
}

criterion_group!(benches, entropy, deform, codec);
criterion_main!(benches);
