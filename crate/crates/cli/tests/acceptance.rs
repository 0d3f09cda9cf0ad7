//! Acceptance suite: ten criteria covering estimator identities, recovery of
//! known ground truth, structural reproductions of the headline analyses, and
//! byte-level pipeline determinism. Each test prints one PASS line with the
//! measured quantities; tolerances are pinned as constants below.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dosewise_core::cohort::cohort_mortality;
use dosewise_core::discretize::{
    DiscreteDataset, DiscretePatient, DiscreteStep, DoseBins, DrugAxis,
};
use dosewise_core::insight::{dose_gap, inclusion_rate, inclusion_rate_rounded, BinSpec, GapMode};
use dosewise_core::mdp::{estimate_mdp, EstimateConfig, TabularMdp};
use dosewise_core::ope::{agreement_histogram, wis_evaluate, BootstrapConfig};
use dosewise_core::solver::{
    behavior_policy, policy_value_model_based, solve_optimal, zero_drug_policy, Policy, SolveConfig,
};
use dosewise_core::synth::{analytic_policy_value, make_ground_truth, sample_cohort, SynthConfig};

// --- pinned tolerances and budgets -----------------------------------------
const C1_IDENTITY_TOL: f64 = 1e-12;
const C1_TIME_LIMIT_S: f64 = 1.0;
const C3_ROW_L1_MAX: f64 = 0.05;
const C3_BEHAVIOR_MAX_NORM: f64 = 0.03;
const C3_TIME_LIMIT_S: f64 = 30.0;
const C4_TIME_LIMIT_S: f64 = 120.0;
const C5_FIXED_POINT_TOL: f64 = 1e-9;
const C6_RELATIVE_ERR: f64 = 0.02;
const C6_COVERAGE_REPS: usize = 200;
const C6_MIN_COVERED: usize = 170; // >= 85% of 200
const C6_TIME_LIMIT_S: f64 = 300.0;
const C8_TRIANGLE_SLACK: f64 = 1e-9;
const C10_RATE_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------

/// Criterion 1: WIS of the behavior policy against itself is exactly the
/// mean discounted return.
#[test]
fn c01_wis_identity_on_behavior_policy() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (seed, salt) in [(3u64, 1u32), (11, 2), (29, 3)] {
        let config = SynthConfig {
            s_count: 12,
            seed,
            ..SynthConfig::default()
        };
        let gt = make_ground_truth(&config).unwrap();
        let (_, d) = sample_cohort(&gt, 1000, salt).unwrap();
        let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
        let (behavior, _) = behavior_policy(&mdp);
        let report = wis_evaluate(&d, &behavior, &behavior, 0.99, 100.0, None).unwrap();
        let mean = report.returns.iter().sum::<f64>() / report.returns.len() as f64;
        worst = worst.max((report.point_estimate - mean).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(
        worst <= C1_IDENTITY_TOL,
        "identity error {worst:e} exceeds {C1_IDENTITY_TOL:e}"
    );
    assert!(
        secs < C1_TIME_LIMIT_S,
        "took {secs:.2}s, budget {C1_TIME_LIMIT_S}s"
    );
    println!("[c01] PASS — WIS(behavior, behavior) = mean return, max |diff| {worst:e} over 3 cohorts ({secs:.2}s)");
}

/// Criterion 2: the zero-drug policy's importance weights are positive on
/// exactly the all-action-1 trajectories, and the nonzero-weight fraction is
/// exactly their empirical share.
#[test]
fn c02_zero_drug_support_pathology() {
    let config = SynthConfig {
        s_count: 10,
        absorb_prob: 0.45,
        behavior_support: 4,
        behavior_floor: 0.01,
        seed: 7,
        ..SynthConfig::default()
    };
    let gt = make_ground_truth(&config).unwrap();
    let (_, d) = sample_cohort(&gt, 2000, 1).unwrap();
    let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
    let (behavior, _) = behavior_policy(&mdp);
    let zero = zero_drug_policy(d.s_count);
    let report = wis_evaluate(&d, &behavior, &zero, 0.99, 100.0, None).unwrap();

    let mut all_one = 0usize;
    for (i, p) in d.patients.iter().enumerate() {
        let is_all_one = p.steps.iter().all(|s| s.action == 1);
        if is_all_one {
            all_one += 1;
        }
        assert_eq!(
            report.weights[i] > 0.0,
            is_all_one,
            "trajectory {i}: weight {} but all-action-1 = {is_all_one}",
            report.weights[i]
        );
    }
    assert!(
        all_one > 0,
        "construction must contain some all-action-1 trajectories"
    );
    assert!(all_one < d.patients.len());
    assert_eq!(
        report.nonzero_weight_fraction,
        all_one as f64 / d.patients.len() as f64
    );
    println!(
        "[c02] PASS — zero-drug weights positive on exactly {all_one}/{} all-action-1 trajectories, fraction exact",
        d.patients.len()
    );
}

/// Criterion 3: with 50,000 sampled transitions on a 20-state / 25-action
/// world, every observed transition row is within 0.05 L1 of the truth and
/// the recovered behavior policy is within 0.03 in max-norm.
///
/// The world is built by hand so that the 50,000-transition budget is spread
/// evenly: the clinician uses two actions per state (probabilities 0.45 /
/// 0.55, alternating by state parity) and both actions shift the state by an
/// odd offset, which makes the live dynamics doubly stochastic. A uniform
/// start therefore stays uniform, and each of the 40 observed rows collects
/// about 1,250 samples.
#[test]
fn c03_transition_and_behavior_recovery() {
    let start = Instant::now();
    let s_count = 20usize;
    let a_count = 25usize;
    let config = SynthConfig {
        s_count,
        a_count,
        branching: 1,
        behavior_support: 2,
        behavior_floor: 0.0,
        feature_dim: 2,
        absorb_prob: 0.04,
        seed: 13,
        ..SynthConfig::default()
    };
    let (act_a, act_b) = (3usize, 11usize); // both odd shifts below
    let mut transition = Vec::with_capacity(s_count * a_count);
    for s in 1..=s_count {
        for a in 1..=a_count {
            let mut row = vec![0.0f64; s_count + 2];
            let live = 1 + (s - 1 + a) % s_count;
            row[live - 1] = 1.0 - config.absorb_prob;
            row[s_count] = config.absorb_prob * (1.0 - config.death_share);
            row[s_count + 1] = config.absorb_prob * config.death_share;
            transition.push(row);
        }
    }
    let behavior: Vec<Vec<f64>> = (1..=s_count)
        .map(|s| {
            let p = if s % 2 == 1 { 0.45 } else { 0.55 };
            let mut row = vec![0.0f64; a_count];
            row[act_a - 1] = p;
            row[act_b - 1] = 1.0 - p;
            row
        })
        .collect();
    let gt = dosewise_core::synth::GroundTruth {
        transition,
        behavior,
        means: (1..=s_count)
            .map(|s| vec![s as f64, (s_count - s) as f64])
            .collect(),
        initial: vec![1.0 / s_count as f64; s_count],
        config,
    };
    let (_, mut d) = sample_cohort(&gt, 2200, 1).unwrap();

    // Keep whole trajectories up to the first 50,000 transitions.
    let mut total = 0usize;
    let mut keep = 0usize;
    for p in &d.patients {
        if total >= 50_000 {
            break;
        }
        total += p.steps.len();
        keep += 1;
    }
    d.patients.truncate(keep);
    assert!(total >= 50_000, "cohort too small: {total} transitions");

    let (mdp, orphans) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
    assert!(
        orphans.is_empty(),
        "every state should be visited: orphans {orphans:?}"
    );

    let mut max_l1: f64 = 0.0;
    let mut observed_rows = 0usize;
    for s in 1..=20 {
        for a in 1..=25 {
            if let Some(est) = mdp.transition_row(s, a).unwrap() {
                observed_rows += 1;
                let truth = gt.row(s, a);
                let l1: f64 = est
                    .iter()
                    .zip(truth.iter())
                    .map(|(e, t)| (e - t).abs())
                    .sum();
                max_l1 = max_l1.max(l1);
            }
        }
    }

    let (est_behavior, _) = behavior_policy(&mdp);
    let truth_behavior = gt.behavior_policy();
    let mut max_behavior: f64 = 0.0;
    for s in 1..=20 {
        for a in 1..=25 {
            let diff = (est_behavior.prob(s, a) - truth_behavior.prob(s, a)).abs();
            max_behavior = max_behavior.max(diff);
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert_eq!(
        observed_rows,
        2 * s_count,
        "exactly the two support actions per state are observed"
    );
    assert!(
        max_l1 < C3_ROW_L1_MAX,
        "max row L1 {max_l1:.4} exceeds {C3_ROW_L1_MAX}"
    );
    assert!(
        max_behavior < C3_BEHAVIOR_MAX_NORM,
        "behavior max-norm {max_behavior:.4} exceeds {C3_BEHAVIOR_MAX_NORM}"
    );
    assert!(
        secs < C3_TIME_LIMIT_S,
        "took {secs:.2}s, budget {C3_TIME_LIMIT_S}s"
    );
    println!(
        "[c03] PASS — {total} transitions, {observed_rows} observed rows: max row L1 {max_l1:.4} < {C3_ROW_L1_MAX}, behavior max-norm {max_behavior:.4} < {C3_BEHAVIOR_MAX_NORM} ({secs:.1}s)"
    );
}

/// Criterion 4: Monte Carlo rollouts of the estimated model under the
/// estimated behavior policy reproduce the cohort's mortality and mean
/// trajectory length within two batch standard deviations
/// (1,000 batches x 2,500 rollouts).
#[test]
fn c04_rollout_validation_matches_cohort() {
    let start = Instant::now();
    let config = SynthConfig {
        s_count: 20,
        seed: 19,
        ..SynthConfig::default()
    };
    let gt = make_ground_truth(&config).unwrap();
    let (cohort, d) = sample_cohort(&gt, 5000, 1).unwrap();
    let cohort_mort = cohort_mortality(&cohort).unwrap();
    let cohort_len = cohort.timestep_count() as f64 / cohort.len() as f64;

    let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
    let (behavior, _) = behavior_policy(&mdp);
    let initial = d.initial_state_distribution().unwrap();
    let rcfg = dosewise_core::rollout::RolloutConfig {
        batches: 1000,
        batch_size: 2500,
        max_steps: 200,
        seed: 0,
    };
    let stats = dosewise_core::rollout::validate_model(&mdp, &behavior, &initial, &rcfg).unwrap();

    let mort_gap = (stats.mortality_mean - cohort_mort).abs();
    let len_gap = (stats.length_mean - cohort_len).abs();
    let secs = start.elapsed().as_secs_f64();
    assert!(
        mort_gap < 2.0 * stats.mortality_sd,
        "mortality gap {mort_gap:.4} vs 2*sd {:.4}",
        2.0 * stats.mortality_sd
    );
    assert!(
        len_gap < 2.0 * stats.length_sd,
        "length gap {len_gap:.3} vs 2*sd {:.3}",
        2.0 * stats.length_sd
    );
    assert!(
        secs < C4_TIME_LIMIT_S,
        "took {secs:.1}s, budget {C4_TIME_LIMIT_S}s"
    );
    println!(
        "[c04] PASS — model mortality {:.4} (sd {:.4}) vs cohort {:.4}; length {:.2} (sd {:.2}) vs cohort {:.2} ({secs:.1}s)",
        stats.mortality_mean, stats.mortality_sd, cohort_mort, stats.length_mean, stats.length_sd, cohort_len
    );
}

/// Criterion 5: the solver reproduces hand-solved fixed points to 1e-9, and
/// the optimal policy never selects a disallowed action anywhere in the test
/// matrix of synthetic worlds.
#[test]
fn c05_bellman_fixed_points_and_safety_mask() {
    // One-hop world: state 1 always discharges, state 2 always dies.
    let gamma = 0.99;
    let one_hop = TabularMdp::from_counts(
        2,
        1,
        EstimateConfig {
            gamma,
            prune_min_count: 1,
            ..EstimateConfig::default()
        },
        &[(1, 1, 3, 10), (2, 1, 4, 10)],
    )
    .unwrap();
    let cfg = SolveConfig {
        tol: 1e-10,
        max_iter: 1_000_000,
        fallback_action: None,
    };
    let sol = solve_optimal(&one_hop, &cfg).unwrap();
    assert!(
        (sol.values.v[0] - 100.0).abs() <= C5_FIXED_POINT_TOL,
        "v1 = {}",
        sol.values.v[0]
    );
    assert!(
        (sol.values.v[1] + 100.0).abs() <= C5_FIXED_POINT_TOL,
        "v2 = {}",
        sol.values.v[1]
    );

    // Self-loop world: v = 0.5*gamma*v + 0.5*100.
    let self_loop = TabularMdp::from_counts(
        1,
        1,
        EstimateConfig {
            gamma,
            prune_min_count: 1,
            ..EstimateConfig::default()
        },
        &[(1, 1, 1, 1), (1, 1, 2, 1)],
    )
    .unwrap();
    let sol = solve_optimal(&self_loop, &cfg).unwrap();
    let expected = 50.0 / (1.0 - 0.5 * gamma);
    assert!(
        (sol.values.v[0] - expected).abs() <= C5_FIXED_POINT_TOL,
        "self-loop v {} vs {expected}",
        sol.values.v[0]
    );

    // Mixed stochastic policy: v = 0.5*100 + 0.5*(0.5*gamma*v + 50).
    let two_action = TabularMdp::from_counts(
        1,
        2,
        EstimateConfig {
            gamma,
            prune_min_count: 1,
            ..EstimateConfig::default()
        },
        &[(1, 1, 2, 5), (1, 2, 1, 5), (1, 2, 2, 5)],
    )
    .unwrap();
    let mixed = Policy::Stochastic {
        probs: vec![vec![0.5, 0.5]],
    };
    let (vf, _) = policy_value_model_based(&two_action, &mixed, 1e-12, 1_000_000).unwrap();
    let expected = 75.0 / (1.0 - 0.5 * 0.5 * gamma);
    assert!(
        (vf.v[0] - expected).abs() <= C5_FIXED_POINT_TOL,
        "mixed v {} vs {expected}",
        vf.v[0]
    );

    // Safety mask, exhaustively over the world matrix.
    let mut states_checked = 0usize;
    for seed in [5u64, 17, 29] {
        for support in [3usize, 6] {
            let config = SynthConfig {
                s_count: 15,
                behavior_support: support,
                seed,
                ..SynthConfig::default()
            };
            let gt = make_ground_truth(&config).unwrap();
            let (_, d) = sample_cohort(&gt, 2000, 1).unwrap();
            let (mdp, _) = estimate_mdp(&d, EstimateConfig::default()).unwrap();
            let fallback = SolveConfig {
                fallback_action: Some(1),
                ..SolveConfig::default()
            };
            let sol = solve_optimal(&mdp, &fallback).unwrap();
            for s in 1..=mdp.s_count() {
                states_checked += 1;
                let chosen = sol.policy.action(s).unwrap();
                let any_allowed = (1..=mdp.a_count()).any(|a| mdp.allowed(s, a).unwrap());
                if any_allowed {
                    assert!(
                        mdp.allowed(s, chosen).unwrap(),
                        "seed {seed} support {support}: state {s} chose disallowed action {chosen}"
                    );
                    assert!(sol.values.q[s - 1][chosen - 1].is_some());
                } else {
                    assert_eq!(chosen, 1, "fallback states must take action 1");
                }
            }
        }
    }
    println!(
        "[c05] PASS — hand fixed points within {C5_FIXED_POINT_TOL:e}; no disallowed action over {states_checked} states across 6 worlds"
    );
}

/// Criterion 6: WIS of a fixed stochastic target converges to the analytic
/// value within 2% relative error at 100,000 trajectories, and the 90%
/// bootstrap lower bound is exceeded by the truth in at least 85% of 200
/// repetitions.
#[test]
fn c06_ope_convergence_and_coverage() {
    let start = Instant::now();
    let gamma = 0.99;
    let reward = 100.0;
    let config = SynthConfig {
        s_count: 12,
        absorb_prob: 0.25,
        behavior_support: 4,
        behavior_alpha: 8.0,
        behavior_floor: 0.0,
        seed: 23,
        ..SynthConfig::default()
    };
    let gt = make_ground_truth(&config).unwrap();
    let behavior = gt.behavior_policy();

    // Tilted target: half the behavior, half uniform over its support —
    // guaranteed overlap, different enough to stress the weights.
    let probs = match &behavior {
        Policy::Stochastic { probs } => probs.clone(),
        _ => unreachable!(),
    };
    let target_probs: Vec<Vec<f64>> = probs
        .iter()
        .map(|row| {
            let support: Vec<usize> = (0..row.len()).filter(|&a| row[a] > 0.0).collect();
            let u = 1.0 / support.len() as f64;
            row.iter()
                .enumerate()
                .map(|(a, p)| if row[a] > 0.0 { 0.5 * p + 0.5 * u } else { 0.0 })
                .collect()
        })
        .collect();
    let target = Policy::Stochastic {
        probs: target_probs,
    };

    let v = analytic_policy_value(&gt, &target, gamma, reward).unwrap();
    let truth: f64 = v.iter().zip(gt.initial.iter()).map(|(v, p)| v * p).sum();
    assert!(
        truth.abs() > 10.0,
        "analytic value {truth:.2} too close to zero for a relative check"
    );

    let (_, d) = sample_cohort(&gt, 100_000, 9).unwrap();
    let report = wis_evaluate(&d, &behavior, &target, gamma, reward, None).unwrap();
    let rel = (report.point_estimate - truth).abs() / truth.abs();
    assert!(
        rel < C6_RELATIVE_ERR,
        "WIS {:.3} vs analytic {truth:.3}: relative error {rel:.4}",
        report.point_estimate
    );

    let boot = BootstrapConfig {
        resamples: 500,
        confidence: 0.90,
        seed: 0,
    };
    let mut covered = 0usize;
    for rep in 0..C6_COVERAGE_REPS {
        let (_, d) = sample_cohort(&gt, 400, 1000 + rep as u32).unwrap();
        let r = wis_evaluate(&d, &behavior, &target, gamma, reward, Some(&boot)).unwrap();
        if truth >= r.bootstrap.unwrap().lower {
            covered += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(
        covered >= C6_MIN_COVERED,
        "lower bound covered the truth in only {covered}/{C6_COVERAGE_REPS} repetitions"
    );
    assert!(
        secs < C6_TIME_LIMIT_S,
        "took {secs:.1}s, budget {C6_TIME_LIMIT_S}s"
    );
    println!(
        "[c06] PASS — WIS {:.3} vs analytic {truth:.3} (rel err {rel:.4} < {C6_RELATIVE_ERR}); 90% lower bound covered {covered}/{C6_COVERAGE_REPS} ({secs:.1}s)",
        report.point_estimate
    );
}

/// Criterion 7: on a world where the optimal action is taken 6% of the time
/// in half the states and 1% in the rest, the agreement summary reports
/// exactly half the visited states above the 5% threshold.
#[test]
fn c07_agreement_histogram_structure() {
    let s_count = 10;
    let planted_action = 3usize;
    let mut patients = Vec::new();
    for s in 1..=s_count {
        let matches = if s <= 5 { 6 } else { 1 };
        let steps: Vec<DiscreteStep> = (0..100)
            .map(|i| DiscreteStep {
                state: s,
                action: if i < matches { planted_action } else { 1 },
            })
            .collect();
        patients.push(DiscretePatient {
            patient_id: format!("p{s:02}"),
            outcome: dosewise_core::cohort::Outcome::Survived90,
            steps,
        });
    }
    let d = DiscreteDataset {
        s_count,
        a_count: 25,
        patients,
    };
    let policy = Policy::Deterministic {
        actions: vec![planted_action; s_count],
    };
    let report = agreement_histogram(&d, &policy, 0.05).unwrap();

    assert_eq!(report.visited_count, s_count);
    assert_eq!(
        report.above_threshold,
        s_count / 2,
        "exactly half the states are above 5%"
    );
    assert!(report.never_visited.is_empty());
    for entry in &report.per_state {
        let expected = if entry.state <= 5 { 0.06 } else { 0.01 };
        assert_eq!(entry.fraction, expected, "state {}", entry.state);
    }
    println!(
        "[c07] PASS — agreement summary ({}, {}) with per-state fractions 0.06 / 0.01 as planted",
        report.above_threshold, report.visited_count
    );
}

/// Criterion 8: the 1 L-excess / 1 L-deficit patient yields AverageGap = 0
/// and AbsoluteTotalGap = 2000 mL, and |steps * AverageGap| never exceeds
/// AbsoluteTotalGap for any patient in a full synthetic cohort.
#[test]
fn c08_dose_gap_arithmetic_and_triangle_inequality() {
    use dosewise_core::cohort::{Cohort, CohortSchema, Outcome, Timestep, Trajectory};
    use dosewise_core::discretize::{DiscretizationModel, FitStats, Scaler};

    // Hand-built model: one feature, one state, recommended action 16 =
    // fluid bin 4 (1000 mL) with no vasopressor.
    let model = DiscretizationModel {
        schema: CohortSchema {
            feature_names: vec!["f".into()],
            units: vec!["u".into()],
            dim: 1,
            interval_hours: 4.0,
        },
        scaler: Scaler {
            mean: vec![0.0],
            scale: vec![1.0],
        },
        centroids: vec![vec![0.0]],
        fluid: DoseBins {
            edges: [50.0, 300.0, 750.0, 1500.0],
            representative: [0.0, 25.0, 150.0, 1000.0, 2000.0],
        },
        vaso: DoseBins {
            edges: [0.05, 0.15, 0.35, 0.8],
            representative: [0.0, 0.02, 0.1, 0.2, 0.9],
        },
        s_count: 1,
        seed: 0,
        fit_stats: FitStats {
            objective: 0.0,
            iterations: 1,
            converged: true,
        },
    };
    let policy = Policy::Deterministic { actions: vec![16] };
    let step = |fluid: f64| Timestep {
        t: 0,
        features: vec![0.0],
        fluid,
        vaso: 0.0,
    };
    let cohort = Cohort {
        schema: model.schema.clone(),
        trajectories: vec![Trajectory {
            patient_id: "p1".into(),
            outcome: Outcome::Survived90,
            steps: vec![step(2000.0), step(0.0)],
        }],
    };
    let avg = dose_gap(
        &cohort,
        &model,
        &policy,
        GapMode::AverageGap,
        DrugAxis::Fluid,
        &BinSpec::Deciles,
    )
    .unwrap();
    let abs = dose_gap(
        &cohort,
        &model,
        &policy,
        GapMode::AbsoluteTotalGap,
        DrugAxis::Fluid,
        &BinSpec::Deciles,
    )
    .unwrap();
    assert_eq!(
        avg.patients[0].value, 0.0,
        "1 L over then 1 L under averages to zero"
    );
    assert_eq!(
        abs.patients[0].value, 2000.0,
        "absolute total charges both liters"
    );

    // Triangle inequality across an end-to-end synthetic cohort, both axes.
    let config = SynthConfig {
        s_count: 6,
        feature_dim: 2,
        branching: 2,
        behavior_support: 3,
        seed: 31,
        ..SynthConfig::default()
    };
    let gt = make_ground_truth(&config).unwrap();
    let (cohort, d) = sample_cohort(&gt, 600, 1).unwrap();
    let (mdp, _) = estimate_mdp(
        &d,
        EstimateConfig {
            prune_min_count: 2,
            ..EstimateConfig::default()
        },
    )
    .unwrap();
    let sol = solve_optimal(
        &mdp,
        &SolveConfig {
            fallback_action: Some(1),
            ..SolveConfig::default()
        },
    )
    .unwrap();
    let (fitted, _) = dosewise_core::discretize::fit_discretizer(
        &cohort,
        &dosewise_core::discretize::DiscretizerConfig {
            restarts: 8,
            ..dosewise_core::discretize::DiscretizerConfig::new(6, 3)
        },
    )
    .unwrap();
    let mut patients_checked = 0usize;
    for axis in [DrugAxis::Fluid, DrugAxis::Vaso] {
        let avg = dose_gap(
            &cohort,
            &fitted,
            &sol.policy,
            GapMode::AverageGap,
            axis,
            &BinSpec::Deciles,
        )
        .unwrap();
        let abs = dose_gap(
            &cohort,
            &fitted,
            &sol.policy,
            GapMode::AbsoluteTotalGap,
            axis,
            &BinSpec::Deciles,
        )
        .unwrap();
        for (a, b) in avg.patients.iter().zip(abs.patients.iter()) {
            assert_eq!(a.patient_id, b.patient_id);
            assert!(
                (a.n_steps as f64 * a.value).abs() <= b.value + C8_TRIANGLE_SLACK,
                "patient {}: |{} * {}| > {}",
                a.patient_id,
                a.n_steps,
                a.value,
                b.value
            );
            patients_checked += 1;
        }
    }
    println!(
        "[c08] PASS — +-1 L patient: AverageGap 0, AbsoluteTotalGap 2000; triangle inequality held for {patients_checked} patient-axis pairs"
    );
}

// --- criterion 9 helpers ----------------------------------------------------

const C9_CFG: &str = r#"{
  "synth": { "s_count": 6, "branching": 2, "behavior_support": 3, "behavior_floor": 0.01,
             "feature_dim": 2, "absorb_prob": 0.35, "n": 400, "seed": 5, "salt": 2 },
  "discretizer": { "s_count": 6, "restarts": 4 },
  "mdp": { "prune_min_count": 2 },
  "ope": { "resamples": 50 },
  "rollout": { "batches": 4, "batch_size": 200 },
  "analysis": { "classifier": { "trees": 10, "permutations": 3 } }
}"#;

fn collect_files(root: &Path, rel: &Path, into: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(root.join(rel)).unwrap() {
        let entry = entry.unwrap();
        let child = rel.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            collect_files(root, &child, into);
        } else {
            into.push(child);
        }
    }
}

fn tree_digest(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    collect_files(root, Path::new(""), &mut files);
    files.sort();
    files
        .into_iter()
        .map(|rel| (rel.clone(), fs::read(root.join(rel)).unwrap()))
        .collect()
}

/// Criterion 9: the full pipeline produces byte-identical artifacts across
/// repeated runs and across worker counts 1 through 8.
#[test]
fn c09_pipeline_determinism_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, C9_CFG).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let run = |out: &str, workers: &str| -> Output {
        Command::new(env!("CARGO_BIN_EXE_dosewise"))
            .current_dir(dir.path())
            .args([
                "pipeline",
                "--config",
                cfg,
                "--set",
                &format!("output_dir={out}"),
                "--workers",
                workers,
            ])
            .output()
            .expect("binary runs")
    };
    let cases = [("w1", "1"), ("w2", "2"), ("w8", "8"), ("w8_again", "8")];
    for (out, workers) in &cases {
        let o = run(out, workers);
        assert_eq!(
            o.status.code(),
            Some(0),
            "workers {workers}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let reference = tree_digest(&dir.path().join("w1"));
    assert!(reference.len() > 20, "expected a populated run directory");
    for (out, workers) in &cases[1..] {
        let other = tree_digest(&dir.path().join(out));
        assert_eq!(
            reference.len(),
            other.len(),
            "file count differs for workers {workers}"
        );
        for ((ra, ba), (rb, bb)) in reference.iter().zip(other.iter()) {
            assert_eq!(ra, rb, "path sets diverge for workers {workers}");
            assert_eq!(
                ba,
                bb,
                "bytes differ in {} for workers {workers}",
                ra.display()
            );
        }
    }
    println!(
        "[c09] PASS — {} artifacts byte-identical across repeated runs and workers 1, 2, 8",
        reference.len()
    );
}

/// Criterion 10: the cohort inclusion rate for (107,450 included;
/// 922,563 excluded) is 0.1043 within 1e-4.
#[test]
fn c10_inclusion_rate_arithmetic() {
    let rate = inclusion_rate(107_450, 922_563).unwrap();
    assert!((rate - 0.1043).abs() <= C10_RATE_TOL, "rate {rate}");
    assert_eq!(inclusion_rate_rounded(107_450, 922_563).unwrap(), 0.1043);
    println!("[c10] PASS — inclusion rate {rate:.6} = 0.1043 +- {C10_RATE_TOL}");
}
