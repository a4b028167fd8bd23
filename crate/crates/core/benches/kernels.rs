//! Kernel timings. In the default `parallel` build every kernel runs once on a
//! one-thread rayon pool and once on the global pool; with
//! `--no-default-features` only the sequential path exists.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cassi_refine::datamodel::{generate_mask, generate_scene};
use cassi_refine::refiner::RefinerArch;
use cassi_refine::rng::standard_normal;
use cassi_refine::training::{train_step, Problem, TrainConfig, TrainScene, TrainState, Variant};
use cassi_refine::{Cube, ForwardOperator, GroupSpec, InitialPredictor, MaskKind, RefinerModel, SceneSpec, SystemSpec};

const H: usize = 64;
const B: usize = 8;

fn operator() -> ForwardOperator {
    let mask = generate_mask(H, H, MaskKind::Bernoulli, 0.5, 1).unwrap();
    ForwardOperator::new(SystemSpec::new(mask, 2, 0.0).unwrap(), B).unwrap()
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("threads=1", Some(one)), ("threads=all", None)]
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
fn run<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn kernels(c: &mut Criterion) {
    let op = operator();
    let x = generate_scene(&SceneSpec::new(H, H, B, 6, 3)).unwrap();
    let y = op.forward(&x).unwrap();
    let arch = RefinerArch::new(B, 8, 1).unwrap();
    let model = RefinerModel::<f32>::init(arch, 0).unwrap();
    let z = Cube::from_vec(H, H, B, standard_normal(H * H * B, 7)).unwrap();
    let (r, trace) = model.forward_traced(&z, &x).unwrap();

    let pred = InitialPredictor::adjoint_baseline();
    let gap = InitialPredictor::gap_tv(5, 0.05, 5);
    let group = GroupSpec::default();
    let problem = Problem::new(&op, &pred, &group, Variant::Residual);
    let gap_problem = Problem::new(&op, &gap, &group, Variant::Residual);
    let scenes: Vec<TrainScene<f32>> = (0..4)
        .map(|s| {
            let y = op
                .forward(&generate_scene(&SceneSpec::new(H, H, B, 6, 10 + s)).unwrap())
                .unwrap();
            TrainScene {
                cond: problem.condition(&y).unwrap(),
                y,
                truth: None,
            }
        })
        .collect();
    let config = TrainConfig {
        batch: 4,
        ..TrainConfig::default()
    };

    for (mode, pool) in modes() {
        let mut g = c.benchmark_group("operator");
        g.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| run(&pool, || op.forward(black_box(&x)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("adjoint", mode), |b| {
            b.iter(|| run(&pool, || op.adjoint(black_box(&y)).unwrap()))
        });
        g.finish();

        let mut g = c.benchmark_group("refiner");
        g.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| run(&pool, || model.forward(black_box(&z), &x).unwrap()))
        });
        g.bench_function(BenchmarkId::new("backward", mode), |b| {
            b.iter(|| run(&pool, || model.backward(&trace, black_box(&r)).unwrap()))
        });
        g.finish();

        let mut g = c.benchmark_group("pipeline");
        g.sample_size(10);
        g.bench_function(BenchmarkId::new("gap_tv_5", mode), |b| {
            b.iter(|| run(&pool, || gap_problem.condition(black_box(&y)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("train_step_batch4", mode), |b| {
            let mut state = TrainState::new(model.clone());
            b.iter(|| run(&pool, || train_step(&mut state, &scenes, problem, &config).unwrap()))
        });
        g.finish();
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
