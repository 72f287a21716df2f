use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pointrl_bench::{busy_feed, history, memory_env, policy};
use pointrl_core::env::{episode_rng, rollout, NeuralAgent};
use pointrl_core::policy::episode_backward;
use pointrl_core::reinforce::evaluate;
use pointrl_core::samplecheck::{sample_first_arrival, standard_scenarios};
use pointrl_core::{NeuralPolicy, RegularizerSpec};

fn backward(c: &mut Criterion) {
    let params = policy(10, 20);
    let mut group = c.benchmark_group("episode_backward");
    for n in [20, 200, 2000] {
        let h = history(n, 10, 20);
        group.bench_with_input(BenchmarkId::from_parameter(n), &h, |b, h| {
            b.iter(|| episode_backward(black_box(&params), h, RegularizerSpec::all()).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let scenario = standard_scenarios().pop().unwrap();
    let mut i = 0;
    c.bench_function("first_arrival_three_pieces", |b| {
        b.iter(|| {
            i += 1;
            sample_first_arrival(black_box(&scenario), 1, i).unwrap()
        })
    });
}

fn memory_rollout(c: &mut Criterion) {
    let env = memory_env();
    let params = policy(10, 20);
    let mut i = 0;
    c.bench_function("memory_rollout", |b| {
        b.iter(|| {
            i += 1;
            rollout(
                &env,
                &mut NeuralAgent::new(&params),
                i,
                &mut episode_rng(1, 0, i),
            )
            .unwrap()
        })
    });
    c.bench_function("memory_evaluate_64", |b| {
        b.iter(|| evaluate(&env, &NeuralPolicy(&params), 64, 3).unwrap())
    });
}

fn feed_integrals(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_integral");
    for n in [100, 1000] {
        let feed = busy_feed(n);
        let horizon = n as f64 * 0.1;
        group.bench_with_input(BenchmarkId::from_parameter(n), &feed, |b, f| {
            b.iter(|| f.rank_integral(black_box(horizon)))
        });
    }
    group.finish();
}

criterion_group!(benches, backward, sampling, memory_rollout, feed_integrals);
criterion_main!(benches);
