use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sirmoment_bench::{design, grid, moment_state, observations, theta};
use sirmoment_core::closure::forward_rhs;
use sirmoment_core::emulator::{kriging_weights, DesignPoint, KrigeConfig};
use sirmoment_core::inference::nb_loglik;
use sirmoment_core::ssa::gillespie_run;
use sirmoment_core::EpidemicState;

fn bench_forward_rhs(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_rhs");
    for side in [3, 5, 10] {
        let lattice = grid(side, 100_000);
        let th = theta(&lattice, 100);
        let state = moment_state(&lattice);
        g.bench_with_input(BenchmarkId::from_parameter(side * side), &side, |b, _| {
            b.iter(|| forward_rhs(black_box(&state), &th, &lattice))
        });
    }
    g.finish();
}

fn bench_gillespie(c: &mut Criterion) {
    let mut g = c.benchmark_group("gillespie");
    g.sample_size(10);
    for pop in [1_000u64, 10_000] {
        let lattice = grid(3, pop);
        let th = theta(&lattice, 50);
        let init = EpidemicState::outbreak(&lattice, &th).expect("valid outbreak");
        let times: Vec<f64> = (0..=100).map(f64::from).collect();
        g.bench_with_input(BenchmarkId::new("3x3", pop), &pop, |b, _| {
            let mut seed = 0;
            b.iter(|| {
                seed += 1;
                gillespie_run(&th, &lattice, &init, 100.0, &times, seed).expect("valid run")
            })
        });
    }
    g.finish();
}

fn bench_kriging(c: &mut Criterion) {
    let mut g = c.benchmark_group("kriging_weights");
    let target = DesignPoint {
        coords: vec![0.041, 0.022],
        s0: 12,
    };
    for k in [500, 5_000] {
        let d = design(k);
        for n in [10, 20] {
            let cfg = KrigeConfig::new(0.25 * 2f64.sqrt(), n);
            g.bench_with_input(BenchmarkId::new(format!("K={k}"), n), &n, |b, _| {
                b.iter(|| kriging_weights(&d, black_box(&target), &cfg).expect("in design"))
            });
        }
    }
    g.finish();
}

fn bench_nb_loglik(c: &mut Criterion) {
    let mut g = c.benchmark_group("nb_loglik");
    for (n_s, n_t) in [(25, 80), (27, 150)] {
        let (data, x, idx) = observations(n_s, n_t);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{n_s}x{n_t}")), &n_s, |b, _| {
            b.iter(|| nb_loglik(&data, &idx, black_box(&x), 1.0, 3.2).expect("valid rates"))
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_forward_rhs,
    bench_gillespie,
    bench_kriging,
    bench_nb_loglik
);
criterion_main!(benches);
