//! Parallel vs sequential throughput on the two batch-heavy workloads:
//! exit-time Monte Carlo and conjugate rate evaluation over many states.
//! With the `parallel` feature off, both arms run the sequential code, so
//! the comparison also documents the fallback's overhead profile.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use switchdiff::exec;
use switchdiff::ldp::position_rate;
use switchdiff::model::{box_samples, builtin_model, ModelSpec};
use switchdiff::sim::{batch_exit_mc, batch_exit_mc_seq, SimConfig};

fn two_mode() -> ModelSpec {
    builtin_model("two-mode-linear", &BTreeMap::new()).unwrap()
}

fn bench_exit_mc(c: &mut Criterion) {
    let spec = two_mode();
    let mut cfg = SimConfig::new(0.3);
    cfg.trials = 64;
    cfg.seed = 7;
    cfg.t_max = 50.0;
    let z0 = spec.domain.box_center();

    let mut group = c.benchmark_group("exit-mc");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("batch", "parallel"), |b| {
        b.iter(|| batch_exit_mc(&spec, &cfg, &z0, 0).unwrap())
    });
    group.bench_function(BenchmarkId::new("batch", "sequential"), |b| {
        b.iter(|| batch_exit_mc_seq(&spec, &cfg, &z0, 0).unwrap())
    });
    group.finish();
}

fn bench_rate_eval(c: &mut Criterion) {
    let spec = two_mode();
    let points = box_samples(&spec.domain.bounds, 256, 5);
    let q = vec![0.4, -0.3];

    let mut group = c.benchmark_group("position-rate");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("map", "parallel"), |b| {
        b.iter(|| {
            let vals = exec::map_indexed(points.len(), |i| {
                position_rate(&spec, &points[i], &q, 0.2, 0.04)
            });
            vals.into_iter().map(|v| v.unwrap().value).sum::<f64>()
        })
    });
    group.bench_function(BenchmarkId::new("map", "sequential"), |b| {
        b.iter(|| {
            let vals = exec::map_indexed_seq(points.len(), |i| {
                position_rate(&spec, &points[i], &q, 0.2, 0.04)
            });
            vals.into_iter().map(|v| v.unwrap().value).sum::<f64>()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_exit_mc, bench_rate_eval);
criterion_main!(benches);
