use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffprog::chain::{forward_backward, marginals_via_grad, viterbi};
use diffprog::estimators::{es_gradient, perturbed_argmax_expectation, EsScheme};
use diffprog_bench::chain_potentials;

fn chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("chain");
    for states in [4, 16] {
        let theta = chain_potentials(50, states);
        group.bench_with_input(BenchmarkId::new("forward-backward", states), &states, |b, _| {
            b.iter(|| forward_backward(black_box(&theta)))
        });
        group.bench_with_input(BenchmarkId::new("viterbi", states), &states, |b, _| b.iter(|| viterbi(black_box(&theta))));
        group.bench_with_input(BenchmarkId::new("marginals-via-grad", states), &states, |b, _| {
            b.iter(|| marginals_via_grad(black_box(&theta), 1.0).unwrap())
        });
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let mu = [0.3, -0.1, 0.8, 0.0];
    c.bench_function("perturbed_argmax/1e4", |b| {
        b.iter(|| perturbed_argmax_expectation(black_box(&mu), 1.0, 10_000, 1).unwrap())
    });
    let f = |x: &[f64]| x.iter().map(|v| v.powi(3)).sum::<f64>();
    c.bench_function("es_central/1e4", |b| {
        b.iter(|| es_gradient(f, black_box(&mu), 0.3, 10_000, 1, EsScheme::CentralDiff).unwrap())
    });
}

criterion_group!(benches, chain, estimators);
criterion_main!(benches);
