//! Monte Carlo validation of the estimated model.
//!
//! Simulates batches of trajectories through the estimated MDP under a
//! policy and summarizes mortality and trajectory length per batch. If the
//! model is faithful, simulating under the clinician behavior policy should
//! reproduce the cohort's observed mortality and length within the batch
//! spread.
//!
//! Truncated rollouts (no absorption within `max_steps`) are excluded from
//! both the mortality ratio and the length average and reported separately;
//! counting them either way would silently bias both statistics.
//!
//! Every trajectory draws from its own derived RNG stream keyed by its
//! global index, so statistics are identical whatever the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::TabularMdp;
use crate::seeds::{self, domain};
use crate::solver::{Policy, SolverError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {message}")]
    InvalidConfig { message: String },
    #[error("invalid initial distribution: {message}")]
    InvalidInitial { message: String },
    #[error("shape mismatch: {message}")]
    ShapeMismatch { message: String },
    #[error(
        "rollout reached (state {state}, action {action}) which was never observed in the data"
    )]
    UnobservedPair { state: usize, action: usize },
    #[error("batch {batch} produced no absorbed trajectories; raise max_steps or check the model")]
    NoAbsorbedTrajectories { batch: usize },
    #[error(transparent)]
    Policy(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub batches: usize,
    pub batch_size: usize,
    /// Steps before a rollout is declared truncated.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            batches: 1000,
            batch_size: 2500,
            max_steps: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutOutcome {
    Discharged,
    Died,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrajectory {
    pub outcome: RolloutOutcome,
    /// Number of simulated steps (for truncated rollouts, `max_steps`).
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Died / (died + discharged) within the batch.
    pub mortality: f64,
    /// Mean steps over absorbed trajectories within the batch.
    pub mean_length: f64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub batches: usize,
    pub batch_size: usize,
    /// Mean and sample SD (ddof 1) of per-batch mortality.
    pub mortality_mean: f64,
    pub mortality_sd: f64,
    /// Mean and sample SD (ddof 1) of per-batch mean length.
    pub length_mean: f64,
    pub length_sd: f64,
    /// Truncated rollouts across all batches, as a fraction of the total.
    pub truncated_fraction: f64,
    pub per_batch: Vec<BatchStats>,
}

fn validate_initial(initial: &[f64], s_count: usize) -> Result<(), RolloutError> {
    if initial.len() != s_count {
        return Err(RolloutError::InvalidInitial {
            message: format!("length {} vs {} states", initial.len(), s_count),
        });
    }
    if initial.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(RolloutError::InvalidInitial {
            message: "entries must be finite and non-negative".into(),
        });
    }
    let sum: f64 = initial.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(RolloutError::InvalidInitial {
            message: format!("mass sums to {sum}"),
        });
    }
    Ok(())
}

fn draw_cumulative<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0usize;
    for (i, p) in probs.clone().enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Roll a single trajectory through the model. The caller owns the RNG, so
/// streams can be assigned however reproducibility requires.
pub fn simulate_trajectory(
    m: &TabularMdp,
    policy: &Policy,
    initial: &[f64],
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedTrajectory, RolloutError> {
    let mut state = draw_cumulative(rng, initial.iter().copied()) + 1;
    let mut steps = 0usize;
    while steps < max_steps {
        let action = match policy.action(state) {
            Some(a) => a,
            None => {
                let probs = match policy {
                    Policy::Stochastic { probs } => &probs[state - 1],
                    Policy::Deterministic { .. } => {
                        unreachable!("action() is Some for deterministic")
                    }
                };
                draw_cumulative(rng, probs.iter().copied()) + 1
            }
        };
        let row = m
            .row_ref(state, action)
            .ok_or(RolloutError::UnobservedPair { state, action })?;
        steps += 1;
        let idx = draw_cumulative(rng, row.probs.iter().copied());
        let target = row.targets[idx].0 as usize;
        if target == m.discharge_target() {
            return Ok(SimulatedTrajectory {
                outcome: RolloutOutcome::Discharged,
                steps,
            });
        }
        if target == m.death_target() {
            return Ok(SimulatedTrajectory {
                outcome: RolloutOutcome::Died,
                steps,
            });
        }
        state = target;
    }
    Ok(SimulatedTrajectory {
        outcome: RolloutOutcome::Truncated,
        steps,
    })
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Simulate `batches x batch_size` trajectories and summarize per-batch
/// mortality and length.
pub fn validate_model(
    m: &TabularMdp,
    policy: &Policy,
    initial: &[f64],
    cfg: &RolloutConfig,
) -> Result<RolloutStats, RolloutError> {
    if cfg.batches < 2 || cfg.batch_size == 0 || cfg.max_steps == 0 {
        return Err(RolloutError::InvalidConfig {
            message: format!(
                "need batches >= 2 (got {}), batch_size >= 1 (got {}), max_steps >= 1 (got {})",
                cfg.batches, cfg.batch_size, cfg.max_steps
            ),
        });
    }
    if policy.s_count() != m.s_count() {
        return Err(RolloutError::ShapeMismatch {
            message: format!(
                "policy covers {} states, model has {}",
                policy.s_count(),
                m.s_count()
            ),
        });
    }
    policy.validate(m.a_count())?;
    validate_initial(initial, m.s_count())?;

    let total = cfg.batches * cfg.batch_size;
    let sims: Vec<Result<SimulatedTrajectory, RolloutError>> = (0..total)
        .into_par_iter()
        .map(|global| {
            let mut rng = seeds::stream_rng(cfg.seed, domain::ROLLOUT_TRAJ, global as u64);
            simulate_trajectory(m, policy, initial, cfg.max_steps, &mut rng)
        })
        .collect();

    let mut per_batch = Vec::with_capacity(cfg.batches);
    let mut truncated_total = 0usize;
    for b in 0..cfg.batches {
        let mut died = 0usize;
        let mut discharged = 0usize;
        let mut length_sum = 0usize;
        let mut truncated = 0usize;
        for j in 0..cfg.batch_size {
            let sim = sims[b * cfg.batch_size + j].as_ref().map_err(clone_err)?;
            match sim.outcome {
                RolloutOutcome::Died => {
                    died += 1;
                    length_sum += sim.steps;
                }
                RolloutOutcome::Discharged => {
                    discharged += 1;
                    length_sum += sim.steps;
                }
                RolloutOutcome::Truncated => truncated += 1,
            }
        }
        let absorbed = died + discharged;
        if absorbed == 0 {
            return Err(RolloutError::NoAbsorbedTrajectories { batch: b });
        }
        truncated_total += truncated;
        per_batch.push(BatchStats {
            mortality: died as f64 / absorbed as f64,
            mean_length: length_sum as f64 / absorbed as f64,
            truncated,
        });
    }

    let mortality: Vec<f64> = per_batch.iter().map(|b| b.mortality).collect();
    let lengths: Vec<f64> = per_batch.iter().map(|b| b.mean_length).collect();
    let (mortality_mean, mortality_sd) = mean_and_sd(&mortality);
    let (length_mean, length_sd) = mean_and_sd(&lengths);

    Ok(RolloutStats {
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        mortality_mean,
        mortality_sd,
        length_mean,
        length_sd,
        truncated_fraction: truncated_total as f64 / total as f64,
        per_batch,
    })
}

// `RolloutError` holds strings/usizes only, but simulation results arrive
// behind shared references from the parallel map; rebuild the error by value.
fn clone_err(e: &RolloutError) -> RolloutError {
    match e {
        RolloutError::InvalidConfig { message } => RolloutError::InvalidConfig {
            message: message.clone(),
        },
        RolloutError::InvalidInitial { message } => RolloutError::InvalidInitial {
            message: message.clone(),
        },
        RolloutError::ShapeMismatch { message } => RolloutError::ShapeMismatch {
            message: message.clone(),
        },
        RolloutError::UnobservedPair { state, action } => RolloutError::UnobservedPair {
            state: *state,
            action: *action,
        },
        RolloutError::NoAbsorbedTrajectories { batch } => {
            RolloutError::NoAbsorbedTrajectories { batch: *batch }
        }
        RolloutError::Policy(p) => RolloutError::InvalidConfig {
            message: p.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{EstimateConfig, TabularMdp};

    fn cfg() -> EstimateConfig {
        EstimateConfig::default()
    }

    /// One state; action 1 discharges 75% / dies 25% immediately.
    fn coin_world() -> TabularMdp {
        TabularMdp::from_counts(1, 1, cfg(), &[(1, 1, 2, 30), (1, 1, 3, 10)]).unwrap()
    }

    #[test]
    fn immediate_absorption_has_exact_lengths_and_fair_mortality() {
        let m = coin_world();
        let pi = Policy::Deterministic { actions: vec![1] };
        let rc = RolloutConfig {
            batches: 50,
            batch_size: 400,
            max_steps: 10,
            seed: 5,
        };
        let stats = validate_model(&m, &pi, &[1.0], &rc).unwrap();
        assert_eq!(stats.length_mean, 1.0, "every rollout absorbs in one step");
        assert_eq!(stats.length_sd, 0.0);
        assert_eq!(stats.truncated_fraction, 0.0);
        // Mean of 50 batch proportions, each over 400 draws: se ~ 0.003.
        assert!(
            (stats.mortality_mean - 0.25).abs() < 0.02,
            "mortality {}",
            stats.mortality_mean
        );
        assert!(stats.mortality_sd > 0.0);
    }

    #[test]
    fn geometric_self_loop_matches_expected_length() {
        // 50% self-loop, 50% discharge: length ~ Geometric(0.5), mean 2.
        let m = TabularMdp::from_counts(1, 1, cfg(), &[(1, 1, 1, 10), (1, 1, 2, 10)]).unwrap();
        let pi = Policy::Deterministic { actions: vec![1] };
        let rc = RolloutConfig {
            batches: 40,
            batch_size: 500,
            max_steps: 200,
            seed: 11,
        };
        let stats = validate_model(&m, &pi, &[1.0], &rc).unwrap();
        assert!(
            (stats.length_mean - 2.0).abs() < 0.05,
            "length {}",
            stats.length_mean
        );
        assert_eq!(stats.mortality_mean, 0.0);
    }

    #[test]
    fn truncation_is_reported_and_all_truncated_batches_error() {
        let m = TabularMdp::from_counts(1, 1, cfg(), &[(1, 1, 1, 10)]).unwrap(); // pure self-loop
        let pi = Policy::Deterministic { actions: vec![1] };
        let mut rng = seeds::stream_rng(0, domain::ROLLOUT_TRAJ, 0);
        let sim = simulate_trajectory(&m, &pi, &[1.0], 7, &mut rng).unwrap();
        assert_eq!(sim.outcome, RolloutOutcome::Truncated);
        assert_eq!(sim.steps, 7);

        let rc = RolloutConfig {
            batches: 2,
            batch_size: 5,
            max_steps: 7,
            seed: 0,
        };
        assert!(matches!(
            validate_model(&m, &pi, &[1.0], &rc),
            Err(RolloutError::NoAbsorbedTrajectories { batch: 0 })
        ));
    }

    #[test]
    fn truncated_rollouts_do_not_dilute_mortality_or_length() {
        // Action mixes: 40% self-loop, 30% discharge, 30% death. With a tiny
        // step cap some rollouts truncate; among absorbed ones mortality
        // stays at 0.5.
        let m =
            TabularMdp::from_counts(1, 1, cfg(), &[(1, 1, 1, 40), (1, 1, 2, 30), (1, 1, 3, 30)])
                .unwrap();
        let pi = Policy::Deterministic { actions: vec![1] };
        let rc = RolloutConfig {
            batches: 30,
            batch_size: 500,
            max_steps: 2,
            seed: 2,
        };
        let stats = validate_model(&m, &pi, &[1.0], &rc).unwrap();
        assert!(
            stats.truncated_fraction > 0.1,
            "cap of 2 must truncate ~16%"
        );
        assert!(
            (stats.mortality_mean - 0.5).abs() < 0.03,
            "mortality {}",
            stats.mortality_mean
        );
        // Absorbed lengths are 1 w.p. 0.6/0.84, 2 w.p. 0.24/0.84.
        let want = (0.6 + 2.0 * 0.24) / 0.84;
        assert!(
            (stats.length_mean - want).abs() < 0.03,
            "length {} vs {want}",
            stats.length_mean
        );
    }

    #[test]
    fn stats_are_identical_across_thread_counts() {
        let m = coin_world();
        let pi = Policy::Deterministic { actions: vec![1] };
        let rc = RolloutConfig {
            batches: 10,
            batch_size: 100,
            max_steps: 10,
            seed: 9,
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| validate_model(&m, &pi, &[1.0], &rc).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        let c = validate_model(&m, &pi, &[1.0], &RolloutConfig { seed: 10, ..rc }).unwrap();
        assert_ne!(a.per_batch, c.per_batch, "different seed, different draws");
    }

    #[test]
    fn stochastic_policies_are_sampled() {
        // Action 1 always discharges, action 2 always dies; a 50/50 policy
        // should land near 50% mortality.
        let m = TabularMdp::from_counts(1, 2, cfg(), &[(1, 1, 2, 10), (1, 2, 3, 10)]).unwrap();
        let pi = Policy::Stochastic {
            probs: vec![vec![0.5, 0.5]],
        };
        let rc = RolloutConfig {
            batches: 20,
            batch_size: 500,
            max_steps: 5,
            seed: 4,
        };
        let stats = validate_model(&m, &pi, &[1.0], &rc).unwrap();
        assert!(
            (stats.mortality_mean - 0.5).abs() < 0.03,
            "mortality {}",
            stats.mortality_mean
        );
    }

    #[test]
    fn unobserved_policy_action_is_an_error() {
        let m = coin_world();
        let pi = Policy::Deterministic { actions: vec![1] };
        // Model has action 1 only; force a 2-action policy via a 2-action model mismatch.
        let m2 = TabularMdp::from_counts(1, 2, cfg(), &[(1, 1, 2, 10)]).unwrap();
        let bad = Policy::Deterministic { actions: vec![2] };
        let rc = RolloutConfig {
            batches: 2,
            batch_size: 3,
            max_steps: 5,
            seed: 0,
        };
        assert!(matches!(
            validate_model(&m2, &bad, &[1.0], &rc),
            Err(RolloutError::UnobservedPair {
                state: 1,
                action: 2
            })
        ));
        let _ = validate_model(&m, &pi, &[1.0], &rc).unwrap();
    }

    #[test]
    fn initial_distribution_is_validated() {
        let m = coin_world();
        let pi = Policy::Deterministic { actions: vec![1] };
        let rc = RolloutConfig {
            batches: 2,
            batch_size: 3,
            max_steps: 5,
            seed: 0,
        };
        for bad in [vec![0.5, 0.5], vec![0.9], vec![-1.0]] {
            assert!(matches!(
                validate_model(&m, &pi, &bad, &rc),
                Err(RolloutError::InvalidInitial { .. }) | Err(RolloutError::ShapeMismatch { .. })
            ));
        }
    }

    #[test]
    fn config_is_validated() {
        let m = coin_world();
        let pi = Policy::Deterministic { actions: vec![1] };
        for rc in [
            RolloutConfig {
                batches: 1,
                ..Default::default()
            },
            RolloutConfig {
                batch_size: 0,
                ..Default::default()
            },
            RolloutConfig {
                max_steps: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                validate_model(&m, &pi, &[1.0], &rc),
                Err(RolloutError::InvalidConfig { .. })
            ));
        }
    }
}
