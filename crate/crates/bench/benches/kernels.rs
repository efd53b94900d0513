use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spon_core::model::forward;
use spon_core::sparsify::{calibrate_thresholds, sparse_forward};
use spon_core::tensor::{matmul, matmul_nt};
use spon_core::{LinearSite, Model, ModelConfig, SiteKind, Tensor};

fn matmuls(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[512, 128], 1.0, &mut rng);
    let b = Tensor::randn(&[128, 512], 1.0, &mut rng);
    let w = Tensor::randn(&[512, 128], 1.0, &mut rng);
    c.bench_function("matmul 512x128x512", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("matmul_nt 512x128x512", |bench| bench.iter(|| matmul_nt(black_box(&a), black_box(&w)).unwrap()));
}

fn forwards(c: &mut Criterion) {
    let config = ModelConfig::default();
    let model = Model::init(&config).unwrap();
    let tokens: Vec<u32> = (0..8 * config.context_len as u32).map(|i| (i * 37 + 11) % 256).collect();
    let sites: BTreeSet<LinearSite> =
        (0..config.n_layers).flat_map(|l| SiteKind::ALL.into_iter().map(move |k| LinearSite::new(l, k))).collect();
    let calib: Vec<u32> = (0..4096u32).map(|i| (i * 101 + 7) % 256).collect();
    let profile = calibrate_thresholds(&model, &calib, &sites, 0.5, 0).unwrap();
    c.bench_function("dense forward 8x64", |b| b.iter(|| forward(&model, black_box(&tokens), 8).unwrap()));
    c.bench_function("sparse forward 8x64", |b| {
        b.iter(|| sparse_forward(&model, black_box(&tokens), 8, &profile).unwrap())
    });
}

criterion_group!(benches, matmuls, forwards);
criterion_main!(benches);
