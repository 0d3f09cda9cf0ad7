//! Shared fixtures for the pipeline benchmarks: small synthetic worlds and
//! cohorts sized so a full `cargo bench` run finishes in a couple of minutes
//! while still exercising the real code paths.

use dosewise_core::cohort::Cohort;
use dosewise_core::discretize::DiscreteDataset;
use dosewise_core::mdp::{EstimateConfig, TabularMdp};
use dosewise_core::synth::{
    make_ground_truth, sample_cohort, to_tabular_mdp, GroundTruth, SynthConfig,
};

/// A mid-sized world for sampling-based benchmarks.
pub fn bench_world() -> GroundTruth {
    let config = SynthConfig {
        s_count: 40,
        behavior_support: 4,
        seed: 97,
        ..SynthConfig::default()
    };
    make_ground_truth(&config).expect("valid bench config")
}

/// A cohort of `n` trajectories plus its planted discretization.
pub fn bench_cohort(n: usize) -> (Cohort, DiscreteDataset) {
    sample_cohort(&bench_world(), n, 1).expect("valid cohort size")
}

/// An exact tabular model of a larger world, for solver benchmarks. The
/// discount is kept below the pipeline default so value iteration converges
/// in a benchmark-friendly number of sweeps.
pub fn solver_model() -> TabularMdp {
    let config = SynthConfig {
        s_count: 150,
        behavior_support: 6,
        seed: 131,
        ..SynthConfig::default()
    };
    let gt = make_ground_truth(&config).expect("valid solver config");
    let estimate = EstimateConfig {
        gamma: 0.97,
        prune_min_count: 1,
        ..EstimateConfig::default()
    };
    to_tabular_mdp(&gt, estimate).expect("exact model")
}
