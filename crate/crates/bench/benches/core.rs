use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use seqmatch::engine::{EngineConfig, TrialState};
use seqmatch::estimators::{PairedSample, ReservoirSample};
use seqmatch::inference::{exact_test, ExactOptions};
use seqmatch::numstat::f_quantile;

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("allocate_stream");
    for (n, p) in [(100usize, 2usize), (200, 2), (200, 8)] {
        let xs: Vec<Vec<f64>> = normals(n * p, 1).chunks(p).map(<[f64]>::to_vec).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("n{n}_p{p}")), &xs, |b, xs| {
            b.iter(|| {
                let mut state = TrialState::new(EngineConfig::new(p, 0.10, n as u64, 7)).unwrap();
                for x in xs {
                    black_box(state.allocate(x).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn exact(c: &mut Criterion) {
    let pairs = PairedSample::from_differences(normals(30, 2));
    let res = ReservoirSample::from_responses(normals(20, 3), normals(20, 4));
    c.bench_function("exact_test_mc_1000", |b| {
        b.iter(|| exact_test(&pairs, &res, 0.0, ExactOptions::monte_carlo(1000, 5)).unwrap())
    });
    let small_pairs = PairedSample::from_differences(normals(6, 6));
    let small_res = ReservoirSample::from_responses(normals(4, 7), normals(4, 8));
    c.bench_function("exact_test_full_m6_r8", |b| {
        b.iter(|| exact_test(&small_pairs, &small_res, 0.0, ExactOptions::full()).unwrap())
    });
}

fn quantile(c: &mut Criterion) {
    c.bench_function("f_quantile", |b| b.iter(|| f_quantile(black_box(0.10), 2, black_box(98)).unwrap()));
}

criterion_group!(benches, allocation, exact, quantile);
criterion_main!(benches);
