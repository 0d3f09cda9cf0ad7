//! Learning and auditing treatment policies from fixed-interval clinical
//! trajectories.
//!
//! The pipeline, in data order:
//!
//! 1. [`cohort`] — load trajectories (JSONL or long CSV) and split them.
//! 2. [`discretize`] — fit k-means patient states and quartile dose bins;
//!    map every timestep to a (state, action) pair on a 5x5 action grid
//!    where action 1 means "no drugs".
//! 3. [`mdp`] — count transitions into a tabular MDP with two absorbing
//!    targets (discharge +R, death -R) and a support-based action mask.
//! 4. [`solver`] — safety-constrained value iteration and model-based
//!    policy evaluation.
//! 5. [`ope`] — weighted importance sampling with bootstrap lower bounds,
//!    plus policy-agreement summaries.
//! 6. [`rollout`] — Monte Carlo validation of the estimated model.
//! 7. [`insight`] — dose-gap curves, permutation-importance comparisons and
//!    reporting arithmetic (classifier in [`forest`]).
//! 8. [`synth`] — synthetic worlds with closed-form oracles so every
//!    estimator above can be checked against ground truth.
//!
//! Everything randomized draws from derived per-work-unit streams
//! ([`seeds`]): results are byte-identical across runs and across worker
//! counts. All state and action indices are 1-based throughout; state
//! `s_count + 1` is discharge and `s_count + 2` is death.

pub mod cohort;
pub mod discretize;
pub mod forest;
pub mod insight;
pub mod kmeans;
pub mod mdp;
pub mod ope;
pub mod rollout;
pub mod seeds;
pub mod solver;
pub mod synth;

pub use cohort::{split_cohort, Cohort, CohortError, CohortSchema, Outcome, Timestep, Trajectory};
pub use discretize::{
    discretize_cohort, fit_discretizer, DiscreteDataset, DiscretePatient, DiscreteStep,
    DiscretizationModel, DiscretizeError, DiscretizerConfig, DrugAxis, ACTION_COUNT, DOSE_BINS,
};
pub use forest::{fit_forest, Forest, ForestConfig, ForestError};
pub use insight::{
    compare_importances, dose_gap, inclusion_rate, permutation_importance, BinSpec, DoseGapCurve,
    GapMode, ImportanceComparison, ImportanceConfig, ImportanceReport, InsightError,
};
pub use kmeans::{KMeansConfig, KMeansError, KMeansFit};
pub use mdp::{estimate_mdp, EstimateConfig, MdpError, TabularMdp};
pub use ope::{
    agreement_histogram, bootstrap_lower_bound, wis_evaluate, AgreementReport, BootstrapBound,
    BootstrapConfig, OpeError, OpeReport,
};
pub use rollout::{
    simulate_trajectory, validate_model, RolloutConfig, RolloutError, RolloutOutcome, RolloutStats,
};
pub use solver::{
    behavior_policy, policy_diff, policy_value_model_based, solve_optimal, zero_drug_policy,
    Policy, PolicyDiff, Solution, SolveConfig, SolveInfo, SolverError, ValueFunction,
};
pub use synth::{
    absorption_oracle, analytic_policy_value, make_ground_truth, sample_cohort, to_tabular_mdp,
    AbsorptionStats, GroundTruth, SynthConfig, SynthError,
};
