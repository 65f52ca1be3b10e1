//! Benchmarks for the hot paths: Hamming distance, the likelihood kernel,
//! index lookup against a linear scan, and model inference.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdt_bench::{random_codes, random_vectors};
use hdt_core::{hamming, DenseNet, LikelihoodParams, MultiIndex};

fn bench_hamming(c: &mut Criterion) {
    let codes = random_codes(2, 256, 1);
    c.bench_function("hamming/256-bit", |b| {
        b.iter(|| hamming(black_box(&codes[0]), black_box(&codes[1])).unwrap())
    });
}

fn bench_likelihood(c: &mut Criterion) {
    let params = LikelihoodParams::new(64, 2, 0.05).unwrap();
    let mut group = c.benchmark_group("likelihood");
    for &p in &[1e-12, 0.02, 0.3, 0.97] {
        group.bench_with_input(BenchmarkId::new("log_cdf_safe", p), &p, |b, &p| {
            b.iter(|| black_box(params.log_cdf_safe(black_box(p))))
        });
        group.bench_with_input(BenchmarkId::new("dlog_cdf_dp", p), &p, |b, &p| {
            b.iter(|| black_box(params.dlog_cdf_dp(black_box(p))))
        });
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    const N: usize = 100_000;
    let codes = random_codes(N, 64, 2);
    let queries = random_codes(64, 64, 3);
    let mut index = MultiIndex::new(64, 2).unwrap();
    for (id, code) in codes.iter().enumerate() {
        index.insert(id as u64, *code).unwrap();
    }

    let mut group = c.benchmark_group("search");
    group.throughput(Throughput::Elements(queries.len() as u64));
    group.bench_function(format!("index/{N}x64-bit/r2"), |b| {
        b.iter(|| {
            let mut total = 0usize;
            for q in &queries {
                total += index.lookup(black_box(q)).unwrap().0.len();
            }
            total
        })
    });
    group.bench_function(format!("linear-scan/{N}x64-bit/r2"), |b| {
        b.iter(|| {
            let mut total = 0usize;
            for q in &queries {
                total += codes.iter().filter(|c| hamming(c, q).unwrap() <= 2).count();
            }
            total
        })
    });
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = DenseNet::new(128, &[128, 64], &mut rng).unwrap();
    let raw = random_vectors(128, 128, 5);
    let x = Array2::from_shape_fn((128, 128), |(i, j)| raw[i][j] as f64);
    let mut group = c.benchmark_group("model");
    group.throughput(Throughput::Elements(128));
    group.bench_function("forward/128x128->64", |b| {
        b.iter(|| net.forward(black_box(x.view())).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_hamming, bench_likelihood, bench_search, bench_model);
criterion_main!(benches);
