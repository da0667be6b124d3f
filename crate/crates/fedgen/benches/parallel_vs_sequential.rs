//! Compares the rayon-backed mapping helpers against the always-sequential
//! path on the two hot loops: FMF sample scoring and audit nearest-neighbor
//! search. Build with `--no-default-features` to measure the sequential-only
//! configuration of the whole crate.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use fedgen::audit::nearest_train;
use fedgen::exec::{map_range, map_range_seq};
use fedgen::quality::{client_profile, sample_score};

fn bench_fmf_scoring(c: &mut Criterion) {
    let (h, w) = (16usize, 16usize);
    let pixel = h * w;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let train: Vec<f32> = (0..64 * pixel).map(|_| rng.gen_range(0.0..1.0)).collect();
    let profile = client_profile(&train, 64, h, w, 1, 0, None, &mut rng).unwrap();
    let samples: Vec<f32> = (0..256 * pixel).map(|_| rng.gen_range(0.0..1.0)).collect();

    let mut group = c.benchmark_group("fmf_scoring");
    group.bench_with_input(BenchmarkId::new("map_range", 256), &samples, |b, s| {
        b.iter(|| {
            map_range(256, |i| {
                sample_score(&s[i * pixel..(i + 1) * pixel], &profile).unwrap()
            })
        })
    });
    group.bench_with_input(BenchmarkId::new("map_range_seq", 256), &samples, |b, s| {
        b.iter(|| {
            map_range_seq(256, |i| {
                sample_score(&s[i * pixel..(i + 1) * pixel], &profile).unwrap()
            })
        })
    });
    group.finish();
}

fn bench_audit_nearest(c: &mut Criterion) {
    let pixel = 64usize;
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let train: Vec<f32> = (0..2000 * pixel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let generated: Vec<f32> = (0..128 * pixel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut group = c.benchmark_group("audit_nearest_neighbor");
    group.bench_function("map_range", |b| {
        b.iter(|| {
            map_range(128, |g| {
                nearest_train(&generated[g * pixel..(g + 1) * pixel], &train, pixel)
            })
        })
    });
    group.bench_function("map_range_seq", |b| {
        b.iter(|| {
            map_range_seq(128, |g| {
                nearest_train(&generated[g * pixel..(g + 1) * pixel], &train, pixel)
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_fmf_scoring, bench_audit_nearest);
criterion_main!(benches);
