//! Single-thread pool vs the global rayon pool on the data-parallel paths.
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowpolicy::likelihood::{log_prob_values, TraceMode};
use flowpolicy::model::{GenerativeModel, ModelConfig};
use flowpolicy::numerics::Tensor;
use flowpolicy::sampler::{generate, Scheme, SolverSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("1-thread", Some(single)), ("global", None)]
}

fn run<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn model() -> GenerativeModel {
    let cfg = ModelConfig { hidden: vec![128, 128], ..Default::default() };
    GenerativeModel::new(cfg, 4, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn bench(c: &mut Criterion) {
    let m = model();
    let spec = SolverSpec::new(Scheme::Midpoint, 32).unwrap();
    let mut g = c.benchmark_group("generate_2048");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&pool, || generate(&m, 2048, &spec, None, &mut ChaCha8Rng::seed_from_u64(1), false).unwrap()))
        });
    }
    g.finish();

    let x = Tensor::randn(&[512, 4], &mut ChaCha8Rng::seed_from_u64(2));
    let lspec = SolverSpec::new(Scheme::Euler, 16).unwrap();
    let mut g = c.benchmark_group("hutchinson_512x4_probes");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(&pool, || {
                    log_prob_values(&m, &x, None, &lspec, &TraceMode::hutchinson(4), &mut ChaCha8Rng::seed_from_u64(3))
                        .unwrap()
                })
            })
        });
    }
    g.finish();

    let a = Tensor::randn(&[512, 512], &mut ChaCha8Rng::seed_from_u64(4));
    let bm = Tensor::randn(&[512, 512], &mut ChaCha8Rng::seed_from_u64(5));
    let mut g = c.benchmark_group("gemm_512");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run(&pool, || a.matmul(&bm).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
