//! Compares fanning a batch of independent integrations across workers
//! against the sequential baseline. Built with the default `parallel`
//! feature the batch path uses rayon; built with `--no-default-features`
//! both paths are sequential and should coincide.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use pdflow::batch;
use pdflow::dynamics::{FlowState, Perturbation};
use pdflow::integrate::{integrate_flow, IntegratorConfig};
use pdflow::problem::{random_quad, ConstrainedProblem, SaddlePoint};
use pdflow::scaling::{DampingParams, ScalingSchedule};

struct Instance {
    problem: ConstrainedProblem,
    saddle: SaddlePoint,
}

fn instances(count: u64) -> Vec<Instance> {
    (0..count)
        .map(|seed| {
            let problem = random_quad(8, 3, seed, 1.0).expect("instance");
            let saddle = problem.solve_saddle().expect("saddle");
            Instance { problem, saddle }
        })
        .collect()
}

fn endpoint_error(instance: &Instance) -> f64 {
    let damping = DampingParams::new(2.0, 1.0, 1.0).expect("damping");
    let schedule = ScalingSchedule::constant(1.0, 0.0).expect("schedule");
    let eps = Perturbation::zero(8);
    let init = FlowState::zero(8, 3, 0.0);
    let cfg = IntegratorConfig::rk4(1e-3, 20.0).with_stride(1000);
    let trajectory = integrate_flow(
        &instance.problem,
        &damping,
        &schedule,
        &eps,
        &init,
        &cfg,
        &instance.saddle,
    )
    .expect("integration");
    (&trajectory.final_sample().x - &instance.saddle.primal_star).norm()
}

fn bench_batch(c: &mut Criterion) {
    let batch_inputs = instances(16);
    let mut group = c.benchmark_group("batch_integration");
    group.sample_size(10);

    group.bench_function("fanout", |b| {
        b.iter_batched(
            || (),
            |()| black_box(batch::map(&batch_inputs, endpoint_error)),
            BatchSize::PerIteration,
        )
    });

    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |()| black_box(batch::map_sequential(&batch_inputs, endpoint_error)),
            BatchSize::PerIteration,
        )
    });

    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
