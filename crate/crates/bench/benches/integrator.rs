use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use varwm_core::diff::Mat;
use varwm_core::integrator::{rollout, rollout_batch, solve_step};
use varwm_core::learn::{objective_gradient, ContextEncoder, Window};
use varwm_core::{LagrangianModel, LatentState, ModelConfig, PhysicalContext, SolverConfig, Variant};

fn learned(width: usize) -> LagrangianModel {
    let mut c = ModelConfig::new(Variant::Structured, 2, 0.1);
    c.width = width;
    LagrangianModel::new(c, 3).unwrap()
}

fn solve(c: &mut Criterion) {
    let m = learned(64);
    let eta = PhysicalContext::zeros(8);
    let (q0, q1) = (LatentState(vec![1.0, 0.5]), LatentState(vec![0.99, 0.52]));
    let mut g = c.benchmark_group("solve_step");
    for n in [1, 4, 8] {
        let cfg = SolverConfig::with_iters(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &cfg, |b, cfg| b.iter(|| solve_step(&m, black_box(&q0), black_box(&q1), &eta, cfg).unwrap()));
    }
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let osc = LagrangianModel::analytic(&[1.0], &[1.0], &[0.0], 0.1).unwrap();
    let eta = PhysicalContext::zeros(0);
    let (q0, q1) = (LatentState(vec![1.0]), LatentState(vec![0.1f64.cos()]));
    c.bench_function("rollout/analytic_h500", |b| b.iter(|| rollout(&osc, &q0, &q1, &eta, 500, &SolverConfig::default()).unwrap()));
    let m = learned(32);
    let batch = 64;
    let q0 = Mat::from_vec(2, batch, (0..2 * batch).map(|i| i as f64 * 0.01).collect());
    let q1 = Mat::from_vec(2, batch, (0..2 * batch).map(|i| i as f64 * 0.01 + 0.005).collect());
    let eta = Mat::zeros(8, batch);
    c.bench_function("rollout/learned_batch64_h128", |b| b.iter(|| rollout_batch(&m, &q0, &q1, &eta, 128, &SolverConfig::default()).unwrap()));
}

fn gradient(c: &mut Criterion) {
    let cfg = varwm_core::TrainConfig { width: 32, horizon: 8, ..Default::default() };
    let m = learned(32);
    let enc = ContextEncoder::new(2, 8, 32, 2, 4).unwrap();
    let windows: Vec<Window> =
        (0..32).map(|w| Window::leading((0..10).map(|t| vec![(0.1 * t as f64 + w as f64).cos(), 0.3 * (0.1 * t as f64).sin()]).collect())).collect();
    c.bench_function("objective_gradient/batch32_h8_n8", |b| b.iter(|| objective_gradient(&m, &enc, black_box(&windows), &cfg).unwrap()));
}

criterion_group!(benches, solve, rollouts, gradient);
criterion_main!(benches);
