use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array1;

use vfm_core::experiments::{energy_distance, gaussian_pair, toy_p0, toy_p1};
use vfm_core::nn::{loss_and_gradients, Batch, LossKind, LossWeight, HIDDEN};
use vfm_core::{
    run, GmmOracle, MlpParams, Schedule, SolverConfig, SolverMethod, TimeGrid, TransformKind, TransformedField,
    VelocitySource,
};

const BATCH: usize = 2048;

fn oracle(c: &mut Criterion) {
    let oracle = GmmOracle::new(toy_p0(), toy_p1(), Schedule::third_degree()).unwrap();
    let x = toy_p1().sample(BATCH, 1);
    c.bench_function("oracle_velocity_2048", |b| b.iter(|| oracle.evaluate(black_box(x.view()), 0.4)));
}

fn mlp(c: &mut Criterion) {
    let params = MlpParams::init(2, HIDDEN, 0);
    let x0 = toy_p0().sample(BATCH, 2);
    let x1 = toy_p1().sample(BATCH, 3);
    let t = Array1::linspace(0.0, 1.0, BATCH);
    c.bench_function("mlp_forward_2048", |b| b.iter(|| params.forward(black_box(x1.view()), t.view())));
    let batch = Batch {
        x0: x0.view(),
        x1: x1.view(),
        t: t.view(),
    };
    let schedule = Schedule::third_degree();
    c.bench_function("mlp_loss_and_gradients_2048", |b| {
        b.iter(|| loss_and_gradients(&params, black_box(&batch), &schedule, LossKind::VelocityMatching, LossWeight::Unit))
    });
}

fn solvers(c: &mut Criterion) {
    let (p0, p1) = gaussian_pair();
    let schedule = Schedule::third_degree();
    let oracle = GmmOracle::new(p0, p1.clone(), schedule).unwrap();
    let field = TransformedField::new(&oracle, schedule, TransformKind::ScInterp, 1e-6).unwrap();
    let grid = TimeGrid::sampling(32).unwrap();
    let x = p1.sample(256, 4);
    let mut group = c.benchmark_group("sc_interp_32_steps_256");
    for method in [SolverMethod::Euler, SolverMethod::Heun, SolverMethod::Ab3, SolverMethod::Rk4] {
        group.bench_function(method.to_string(), |b| {
            b.iter(|| run(&field, &grid, SolverConfig::new(method), black_box(x.view())).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let a = toy_p0().sample(1024, 5);
    c.bench_function("energy_distance_1024", |b| {
        b.iter_batched(|| toy_p0().sample(1024, 6), |other| energy_distance(a.view(), other.view()).unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, oracle, mlp, solvers, metrics);
criterion_main!(benches);
