//! Audit analyses on top of the learned policy.
//!
//! * Dose-gap curves: per patient, how far the given doses sat from the
//!   policy's recommended doses, against mortality. The *average* gap lets
//!   over- and under-dosing cancel (an excess of 1 L followed by a deficit
//!   of 1 L counts as matched); the *absolute total* gap sums magnitudes,
//!   so the same patient shows a 2 L total discrepancy. Both views are
//!   kept because they answer different questions.
//! * Permutation importance for two binary targets — "clinician gave the
//!   drug" and "policy recommends the drug" — via the built-in bagged-tree
//!   classifier, plus a ranked comparison of the two importance vectors.
//! * Small cohort-rate arithmetic used in reporting.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Outcome};
use crate::discretize::{DiscretizationModel, DiscretizeError, DrugAxis};
use crate::forest::{fit_forest, ForestConfig, ForestError};
use crate::seeds::{self, domain};
use crate::solver::{Policy, SolverError};

#[derive(Debug, Error)]
pub enum InsightError {
    #[error("cohort has no trajectories")]
    EmptyCohort,
    #[error("trajectory {patient_id} has no timesteps")]
    EmptyTrajectory { patient_id: String },
    #[error("analysis requires a deterministic policy")]
    PolicyNotDeterministic,
    #[error("shape mismatch: {message}")]
    ShapeMismatch { message: String },
    #[error("target has a single class; nothing to fit")]
    SingleClassTarget,
    #[error("too few samples: have {have}, need at least {need}")]
    TooFewSamples { have: usize, need: usize },
    #[error("feature lists differ: {message}")]
    FeatureMismatch { message: String },
    #[error("invalid bin specification: {message}")]
    InvalidBins { message: String },
    #[error("denominator is zero")]
    ZeroDenominator,
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Policy(#[from] SolverError),
}

// ---------------------------------------------------------------------------
// Dose-gap curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    AverageGap,
    AbsoluteTotalGap,
}

/// How patients are grouped along the gap axis: deciles of the observed
/// statistic, or explicit interior edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSpec {
    Deciles,
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapBin {
    pub gap_low: f64,
    pub gap_high: f64,
    pub n_patients: usize,
    /// `None` for empty bins (reported, not fatal).
    pub mortality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGap {
    pub patient_id: String,
    pub n_steps: usize,
    pub value: f64,
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGapCurve {
    pub axis: DrugAxis,
    pub mode: GapMode,
    pub bins: Vec<GapBin>,
    /// 0-based indices of bins with no patients.
    pub empty_bins: Vec<usize>,
    /// Per-patient statistic, in cohort order.
    pub patients: Vec<PatientGap>,
}

/// Compare given doses against the policy's recommendations, patient by
/// patient, and bin mortality along the chosen gap statistic.
pub fn dose_gap(
    cohort: &Cohort,
    model: &DiscretizationModel,
    optimal: &Policy,
    mode: GapMode,
    axis: DrugAxis,
    bins: &BinSpec,
) -> Result<DoseGapCurve, InsightError> {
    if cohort.trajectories.is_empty() {
        return Err(InsightError::EmptyCohort);
    }
    if optimal.action(1.min(optimal.s_count())).is_none() {
        return Err(InsightError::PolicyNotDeterministic);
    }
    if optimal.s_count() != model.s_count {
        return Err(InsightError::ShapeMismatch {
            message: format!(
                "policy covers {} states, model has {}",
                optimal.s_count(),
                model.s_count
            ),
        });
    }
    if let BinSpec::Edges(edges) = bins {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(InsightError::InvalidBins {
                message: "edges must be finite and strictly increasing".into(),
            });
        }
    }

    let per_patient: Vec<Result<PatientGap, InsightError>> = cohort
        .trajectories
        .par_iter()
        .map(|traj| {
            if traj.steps.is_empty() {
                return Err(InsightError::EmptyTrajectory {
                    patient_id: traj.patient_id.clone(),
                });
            }
            let mut sum = 0.0f64;
            let mut abs_sum = 0.0f64;
            for step in &traj.steps {
                let state = model.assign_state(&step.features)?;
                let action = optimal.action(state).expect("checked deterministic");
                let recommended = model.action_dose(action, axis)?;
                let given = match axis {
                    DrugAxis::Fluid => step.fluid,
                    DrugAxis::Vaso => step.vaso,
                };
                let gap = given - recommended;
                sum += gap;
                abs_sum += gap.abs();
            }
            let value = match mode {
                GapMode::AverageGap => sum / traj.steps.len() as f64,
                GapMode::AbsoluteTotalGap => abs_sum,
            };
            Ok(PatientGap {
                patient_id: traj.patient_id.clone(),
                n_steps: traj.steps.len(),
                value,
                died: traj.outcome == Outcome::Died90,
            })
        })
        .collect();

    let mut patients = Vec::with_capacity(per_patient.len());
    for r in per_patient {
        patients.push(r?);
    }

    let values: Vec<f64> = patients.iter().map(|p| p.value).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let interior: Vec<f64> = match bins {
        BinSpec::Edges(edges) => edges.clone(),
        BinSpec::Deciles => {
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
            let n = sorted.len();
            (1..10).map(|k| sorted[(k * n / 10).min(n - 1)]).collect()
        }
    };

    let bin_count = interior.len() + 1;
    let mut n_per = vec![0usize; bin_count];
    let mut deaths = vec![0usize; bin_count];
    for p in &patients {
        // A value equal to an edge belongs to the bin on the right.
        let idx = interior.iter().filter(|e| p.value >= **e).count();
        n_per[idx] += 1;
        if p.died {
            deaths[idx] += 1;
        }
    }

    let mut out_bins = Vec::with_capacity(bin_count);
    let mut empty_bins = Vec::new();
    for i in 0..bin_count {
        let gap_low = if i == 0 { lo } else { interior[i - 1] };
        let gap_high = if i == bin_count - 1 { hi } else { interior[i] };
        let mortality = if n_per[i] == 0 {
            empty_bins.push(i);
            None
        } else {
            Some(deaths[i] as f64 / n_per[i] as f64)
        };
        out_bins.push(GapBin {
            gap_low,
            gap_high,
            n_patients: n_per[i],
            mortality,
        });
    }
    debug_assert_eq!(
        out_bins.iter().map(|b| b.n_patients).sum::<usize>(),
        patients.len()
    );

    Ok(DoseGapCurve {
        axis,
        mode,
        bins: out_bins,
        empty_bins,
        patients,
    })
}

/// Plot-ready CSV: one row per bin.
pub fn gap_curve_csv(curve: &DoseGapCurve) -> String {
    let mut out = String::from("gap_low,gap_high,n_patients,mortality\n");
    for b in &curve.bins {
        let mortality = b.mortality.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.gap_low, b.gap_high, b.n_patients, mortality
        ));
    }
    out
}

/// Per-patient export: one row per patient, cohort order.
pub fn gap_patients_csv(curve: &DoseGapCurve) -> String {
    let mut out = String::from("patient_id,n_steps,value,died\n");
    for p in &curve.patients {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.patient_id, p.n_steps, p.value, p.died
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Permutation importance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            trees: 50,
            max_depth: 6,
            permutations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    /// Mean accuracy drop per feature over the permutations, each drop
    /// floored at 0.
    pub importances: Vec<f64>,
    pub baseline_accuracy: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

/// Timestep-level feature matrix in cohort order, plus the feature names.
pub fn feature_matrix(cohort: &Cohort) -> (Vec<Vec<f64>>, Vec<String>) {
    let rows = cohort
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.features.clone()))
        .collect();
    (rows, cohort.schema.feature_names.clone())
}

/// Timestep label: the clinician administered a non-zero dose on the axis.
pub fn behavior_drug_labels(cohort: &Cohort, axis: DrugAxis) -> Vec<bool> {
    cohort
        .trajectories
        .iter()
        .flat_map(|t| {
            t.steps.iter().map(move |s| match axis {
                DrugAxis::Fluid => s.fluid > 0.0,
                DrugAxis::Vaso => s.vaso > 0.0,
            })
        })
        .collect()
}

/// Timestep label: the policy recommends a non-zero dose on the axis at the
/// timestep's discretized state.
pub fn ai_drug_labels(
    cohort: &Cohort,
    model: &DiscretizationModel,
    policy: &Policy,
    axis: DrugAxis,
) -> Result<Vec<bool>, InsightError> {
    if policy.action(1.min(policy.s_count())).is_none() {
        return Err(InsightError::PolicyNotDeterministic);
    }
    if policy.s_count() != model.s_count {
        return Err(InsightError::ShapeMismatch {
            message: format!(
                "policy covers {} states, model has {}",
                policy.s_count(),
                model.s_count
            ),
        });
    }
    let mut labels = Vec::new();
    for traj in &cohort.trajectories {
        for step in &traj.steps {
            let state = model.assign_state(&step.features)?;
            let action = policy.action(state).expect("checked deterministic");
            labels.push(model.action_dose(action, axis)? > 0.0);
        }
    }
    Ok(labels)
}

/// Fit the built-in classifier on two thirds of the rows and measure, on
/// the held-out third, how much accuracy each feature's permutation costs.
pub fn permutation_importance(
    x: &[Vec<f64>],
    y: &[bool],
    feature_names: &[String],
    cfg: &ImportanceConfig,
) -> Result<ImportanceReport, InsightError> {
    if x.len() != y.len() {
        return Err(InsightError::ShapeMismatch {
            message: format!("{} rows vs {} labels", x.len(), y.len()),
        });
    }
    if x.len() < 3 {
        return Err(InsightError::TooFewSamples {
            have: x.len(),
            need: 3,
        });
    }
    let dim = x[0].len();
    if feature_names.len() != dim {
        return Err(InsightError::ShapeMismatch {
            message: format!("{} feature names vs {} columns", feature_names.len(), dim),
        });
    }
    let pos = y.iter().filter(|b| **b).count();
    if pos == 0 || pos == y.len() {
        return Err(InsightError::SingleClassTarget);
    }
    if cfg.permutations == 0 {
        return Err(InsightError::ShapeMismatch {
            message: "permutations must be positive".into(),
        });
    }

    // Deterministic holdout third.
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = seeds::stream_rng(cfg.seed, domain::FOREST_SPLIT, 0);
    order.shuffle(&mut split_rng);
    let holdout_n = (n / 3).max(1);
    let (hold_idx, train_idx) = order.split_at(holdout_n);

    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
    let train_y: Vec<bool> = train_idx.iter().map(|&i| y[i]).collect();
    let hold_x: Vec<Vec<f64>> = hold_idx.iter().map(|&i| x[i].clone()).collect();
    let hold_y: Vec<bool> = hold_idx.iter().map(|&i| y[i]).collect();

    let forest = fit_forest(
        &train_x,
        &train_y,
        &ForestConfig {
            trees: cfg.trees,
            max_depth: cfg.max_depth,
            seed: cfg.seed,
        },
    )?;
    let baseline = forest.accuracy(&hold_x, &hold_y);

    let drops: Vec<f64> = (0..dim * cfg.permutations)
        .into_par_iter()
        .map(|job| {
            let feature = job / cfg.permutations;
            let mut rng = seeds::stream_rng(cfg.seed, domain::FOREST_PERMUTE, job as u64);
            let mut column: Vec<f64> = hold_x.iter().map(|r| r[feature]).collect();
            column.shuffle(&mut rng);
            let mut correct = 0usize;
            let mut row = vec![0.0f64; dim];
            for (i, (orig, label)) in hold_x.iter().zip(hold_y.iter()).enumerate() {
                row.copy_from_slice(orig);
                row[feature] = column[i];
                if forest.predict(&row) == *label {
                    correct += 1;
                }
            }
            let acc = correct as f64 / hold_x.len() as f64;
            (baseline - acc).max(0.0)
        })
        .collect();

    let importances: Vec<f64> = (0..dim)
        .map(|f| {
            let slice = &drops[f * cfg.permutations..(f + 1) * cfg.permutations];
            slice.iter().sum::<f64>() / cfg.permutations as f64
        })
        .collect();

    Ok(ImportanceReport {
        features: feature_names.to_vec(),
        importances,
        baseline_accuracy: baseline,
        train_size: train_idx.len(),
        holdout_size: holdout_n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiscrepancy {
    pub feature: String,
    pub behavior: f64,
    pub ai: f64,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceComparison {
    pub features: Vec<String>,
    pub importance_behavior: Vec<f64>,
    pub importance_ai: Vec<f64>,
    /// Descending |behavior - ai|; ties resolve alphabetically.
    pub discrepancy_rank: Vec<FeatureDiscrepancy>,
}

pub fn compare_importances(
    behavior: &ImportanceReport,
    ai: &ImportanceReport,
) -> Result<ImportanceComparison, InsightError> {
    if behavior.features != ai.features {
        return Err(InsightError::FeatureMismatch {
            message: format!("{:?} vs {:?}", behavior.features, ai.features),
        });
    }
    let mut rank: Vec<FeatureDiscrepancy> = behavior
        .features
        .iter()
        .zip(behavior.importances.iter().zip(ai.importances.iter()))
        .map(|(name, (b, a))| FeatureDiscrepancy {
            feature: name.clone(),
            behavior: *b,
            ai: *a,
            discrepancy: (b - a).abs(),
        })
        .collect();
    rank.sort_by(|x, y| {
        y.discrepancy
            .partial_cmp(&x.discrepancy)
            .expect("finite importances")
            .then_with(|| x.feature.cmp(&y.feature))
    });
    Ok(ImportanceComparison {
        features: behavior.features.clone(),
        importance_behavior: behavior.importances.clone(),
        importance_ai: ai.importances.clone(),
        discrepancy_rank: rank,
    })
}

/// Plot-ready CSV in discrepancy order.
pub fn comparison_csv(cmp: &ImportanceComparison) -> String {
    let mut out = String::from("feature,imp_behavior,imp_ai,discrepancy\n");
    for d in &cmp.discrepancy_rank {
        out.push_str(&format!(
            "{},{},{},{}\n",
            d.feature, d.behavior, d.ai, d.discrepancy
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Cohort-rate arithmetic
// ---------------------------------------------------------------------------

/// `included / (included + excluded_without_condition)`.
pub fn inclusion_rate(included: u64, excluded_without_condition: u64) -> Result<f64, InsightError> {
    let denom = included + excluded_without_condition;
    if denom == 0 {
        return Err(InsightError::ZeroDenominator);
    }
    Ok(included as f64 / denom as f64)
}

/// The rate as reported: rounded to 4 decimals.
pub fn inclusion_rate_rounded(
    included: u64,
    excluded_without_condition: u64,
) -> Result<f64, InsightError> {
    Ok((inclusion_rate(included, excluded_without_condition)? * 1e4).round() / 1e4)
}
