//! Sequential vs rayon execution of the trial loop and of model fitting.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geoilqr_core::exec::Execution;
use geoilqr_core::planner::ChartStrategy;
use geoilqr_core::tasks::{prepare, run_prepared, TaskSpec};

fn trials(c: &mut Criterion) {
    let mut spec = TaskSpec::grasp2d();
    spec.planning.trials = 8;
    let task = prepare(&spec, Execution::Sequential).unwrap();
    let mut group = c.benchmark_group("grasp2d_trials");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| black_box(run_prepared(&task, ChartStrategy::Optimal, exec).unwrap()))
        });
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let spec = TaskSpec::grasp2d();
    let mut group = c.benchmark_group("grasp2d_prepare");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| black_box(prepare(&spec, exec).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, trials, fitting);
criterion_main!(benches);
