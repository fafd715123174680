//! Truncated SVD cost at representative ranks.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lrtp_core::{decompose_matrix, synth_hidden};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn truncated_svd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = synth_hidden(96, 96, &mut rng);
    let mut group = c.benchmark_group("truncated_svd_96x96");
    for k in [8usize, 48, 96] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| decompose_matrix(black_box(&w), k).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, truncated_svd);
criterion_main!(benches);
