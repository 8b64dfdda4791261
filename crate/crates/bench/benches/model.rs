use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use edgeformer::cost::analyze;
use edgeformer::{decode, DecodeConfig, ModelConfig};
use edgeformer_bench::{batch, edgeformer, matrix};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(black_box(&b)).unwrap()));
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let model = edgeformer(64, 32);
    let b = batch(8, 10, 32);
    c.bench_function("forward d=64 b=8", |bench| bench.iter(|| model.logits(black_box(&b)).unwrap()));
    c.bench_function("forward+backward d=64 b=8", |bench| {
        bench.iter(|| {
            let mut f = model.forward(true, Some(0));
            let (loss, _) = f.loss(&b, 0.1).unwrap();
            f.graph.backward(loss).unwrap()
        })
    });
}

fn decoding(c: &mut Criterion) {
    let model = edgeformer(64, 32);
    let src: Vec<u32> = (4..16).collect();
    let mut g = c.benchmark_group("beam5 len16");
    for cached in [true, false] {
        let cfg = DecodeConfig { beam: 5, max_len: 16, alpha: 0.6, cached };
        g.bench_function(if cached { "cached" } else { "uncached" }, |bench| {
            bench.iter(|| decode(model.view(), black_box(&src), &cfg).unwrap())
        });
    }
    g.finish();
}

fn cost(c: &mut Criterion) {
    let cfg = ModelConfig::preset("edgeformer-512-adapter32").unwrap();
    c.bench_function("analyze edgeformer-512", |bench| bench.iter(|| analyze(black_box(&cfg), 30, 30, 32768).unwrap()));
}

criterion_group!(benches, matmul, forward_backward, decoding, cost);
criterion_main!(benches);
