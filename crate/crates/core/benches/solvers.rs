use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use risk_mdp::model::random_model;
use risk_mdp::par::Exec;
use risk_mdp::vanishing::{default_beta_grid, discount_sweep_with, verify_optimality, VerifyConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sweep(c: &mut Criterion) {
    let model = random_model(&mut ChaCha8Rng::seed_from_u64(1), 40, 4, 1.0);
    let betas = default_beta_grid();
    let mut group = c.benchmark_group("discount_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| discount_sweep_with(&model, 0.2, &betas, 1e-10, exec).unwrap())
        });
    }
    group.finish();
}

fn enumeration(c: &mut Criterion) {
    let model = random_model(&mut ChaCha8Rng::seed_from_u64(2), 6, 3, 1.0);
    let mut group = c.benchmark_group("verify_optimality");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = VerifyConfig { exec, tol: 1e-4, ..VerifyConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, config| {
            b.iter(|| verify_optimality(&model, 0.1, config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep, enumeration);
criterion_main!(benches);
