//! End-to-end stage benchmarks: discretizer fit, model estimation, value
//! iteration, WIS with bootstrap, and model rollouts.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dosewise_bench::{bench_cohort, solver_model};
use dosewise_core::discretize::DiscretizerConfig;
use dosewise_core::mdp::{estimate_mdp, EstimateConfig};
use dosewise_core::ope::{wis_evaluate, BootstrapConfig};
use dosewise_core::rollout::{validate_model, RolloutConfig};
use dosewise_core::solver::{behavior_policy, solve_optimal, zero_drug_policy, SolveConfig};

fn discretizer_fit(c: &mut Criterion) {
    let (cohort, _) = bench_cohort(400);
    let cfg = DiscretizerConfig {
        restarts: 2,
        max_iter: 60,
        ..DiscretizerConfig::new(30, 7)
    };
    c.bench_function("discretizer_fit_5k_steps_k30", |b| {
        b.iter(|| {
            dosewise_core::discretize::fit_discretizer(black_box(&cohort), black_box(&cfg)).unwrap()
        })
    });
}

fn estimation(c: &mut Criterion) {
    let (_, d) = bench_cohort(2000);
    c.bench_function("estimate_mdp_28k_transitions", |b| {
        b.iter(|| estimate_mdp(black_box(&d), EstimateConfig::default()).unwrap())
    });
}

fn value_iteration(c: &mut Criterion) {
    let m = solver_model();
    let cfg = SolveConfig {
        fallback_action: Some(1),
        ..SolveConfig::default()
    };
    let mut g = c.benchmark_group("solver");
    g.sample_size(30);
    g.bench_function("value_iteration_150_states", |b| {
        b.iter(|| solve_optimal(black_box(&m), black_box(&cfg)).unwrap())
    });
    g.finish();
}

fn wis_bootstrap(c: &mut Criterion) {
    let (_, d) = bench_cohort(2000);
    let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
    let (behavior, _) = behavior_policy(&mdp);
    let target = zero_drug_policy(d.s_count);
    let boot = BootstrapConfig {
        resamples: 200,
        confidence: 0.90,
        seed: 0,
    };
    c.bench_function("wis_bootstrap_2k_trajectories_200_resamples", |b| {
        b.iter(|| {
            wis_evaluate(
                black_box(&d),
                black_box(&behavior),
                black_box(&target),
                0.99,
                100.0,
                Some(&boot),
            )
            .unwrap()
        })
    });
}

fn rollouts(c: &mut Criterion) {
    let (_, d) = bench_cohort(2000);
    let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
    let (behavior, _) = behavior_policy(&mdp);
    let initial = d.initial_state_distribution().unwrap();
    let cfg = RolloutConfig {
        batches: 8,
        batch_size: 500,
        max_steps: 200,
        seed: 0,
    };
    let mut g = c.benchmark_group("rollout");
    g.sample_size(30);
    g.bench_function("rollout_8x500_batches", |b| {
        b.iter(|| {
            validate_model(
                black_box(&mdp),
                black_box(&behavior),
                black_box(&initial),
                &cfg,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    discretizer_fit,
    estimation,
    value_iteration,
    wis_bootstrap,
    rollouts
);
criterion_main!(benches);
