//! Sequential vs rayon execution on the two batch-heavy paths: scoring a
//! calibration set and running a reduced benchmark sweep.
//!
//! `cargo bench --bench sweep`. Build with `--no-default-features` to see
//! the parallel mode collapse onto the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ties::bench::{calibration_taus, run_bench, BenchConfig, BenchStrategy};
use ties::exec::Execution;
use ties::synth::ScenarioSpec;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_scenario() -> ScenarioSpec {
    ScenarioSpec {
        n_visual: 128,
        n_language: 8,
        layers: 4,
        ..ScenarioSpec::default()
    }
}

fn tau_batch(c: &mut Criterion) {
    let spec = small_scenario();
    let mut group = c.benchmark_group("calibration_taus");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| calibration_taus(black_box(&spec), 16, 1, 28, exec).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let cfg = BenchConfig {
        scenario: small_scenario(),
        frames_per_regime: 8,
        calibration_frames: 8,
        budgets: vec![16, 32],
        strategies: BenchStrategy::ALL.to_vec(),
        ..BenchConfig::default()
    };
    let mut group = c.benchmark_group("run_bench");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_bench(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, tau_batch, sweep);
criterion_main!(benches);
