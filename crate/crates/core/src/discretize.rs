//! State discretization and the 5x5 action grid.
//!
//! Patient timesteps are z-scored and clustered with seeded k-means into
//! `s_count` states (750 by default at the CLI). Doses are mapped onto five
//! bins per drug: bin 1 is reserved for exactly zero dose, bins 2-5 split
//! the strictly positive doses into empirical quartiles. The joint action
//! index is `a = 5 * (fluid_bin - 1) + vaso_bin`, so `a` ranges over 1..=25
//! and `a == 1` if and only if no drug was given.
//!
//! # Positive-dose bin edges
//!
//! The exact quartile rule matters when doses repeat. Edges are placed at
//! midpoints *between distinct observed dose values*, choosing for each
//! quartile target the boundary whose cumulative count is closest (edges are
//! forced strictly increasing; the fourth edge is the maximum observed
//! positive dose). Placing edges between observed values rather than on
//! them keeps every repeated dose value entirely inside one bin, so a
//! cohort whose doses sit on a small grid re-encodes reproducibly.
//! A positive dose `d` falls in bin `min(5, 2 + #{edges <= d})`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortSchema, Outcome};
use crate::kmeans::{self, KMeansConfig, KMeansError};

/// Dose bins per drug axis.
pub const DOSE_BINS: usize = 5;
/// Size of the joint action grid.
pub const ACTION_COUNT: usize = DOSE_BINS * DOSE_BINS;

#[derive(Debug, Error)]
pub enum DiscretizeError {
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error("invalid {axis} dose edges: {message}")]
    InvalidEdges { axis: DrugAxis, message: String },
    #[error("feature vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("feature component {component} is not finite")]
    NonFiniteInput { component: usize },
    #[error("negative dose {value}")]
    NegativeDose { value: f64 },
    #[error("non-finite dose")]
    NonFiniteDose,
    #[error("action index {action} outside 1..={ACTION_COUNT}")]
    InvalidAction { action: usize },
    #[error("invalid discretizer config: {message}")]
    InvalidConfig { message: String },
    #[error("patient {patient_id}: {source}")]
    InTrajectory {
        patient_id: String,
        #[source]
        source: Box<DiscretizeError>,
    },
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed discretizer artifact: {message}")]
    Malformed { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrugAxis {
    Fluid,
    Vaso,
}

impl std::fmt::Display for DrugAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DrugAxis::Fluid => write!(f, "fluid"),
            DrugAxis::Vaso => write!(f, "vaso"),
        }
    }
}

/// Per-feature z-score parameters. `scale` is the population standard
/// deviation, floored to 1.0 for degenerate (constant) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Returns the scaler plus indices of degenerate features.
    fn fit(points: &[Vec<f64>], dim: usize) -> (Scaler, Vec<usize>) {
        let n = points.len() as f64;
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for p in points {
            for ((s, v), m) in var.iter_mut().zip(p.iter()).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        let mut degenerate = Vec::new();
        let scale: Vec<f64> = var
            .iter()
            .zip(mean.iter())
            .enumerate()
            .map(|(i, (&s, &m))| {
                let sd = (s / n).sqrt();
                if sd <= 1e-12 * (1.0 + m.abs()) {
                    degenerate.push(i);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        (Scaler { mean, scale }, degenerate)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter())
            .zip(self.scale.iter())
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Positive-dose quartile edges and per-bin representative doses.
///
/// `representative[b-1]` is the dose the policy audit charges for bin `b`:
/// zero for bin 1, the median training dose of the bin otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseBins {
    pub edges: [f64; 4],
    pub representative: [f64; 5],
}

impl DoseBins {
    /// Bin for a dose: 1 iff exactly zero, else `min(5, 2 + #{edges <= dose})`.
    pub fn bin(&self, dose: f64) -> Result<usize, DiscretizeError> {
        if !dose.is_finite() {
            return Err(DiscretizeError::NonFiniteDose);
        }
        if dose < 0.0 {
            return Err(DiscretizeError::NegativeDose { value: dose });
        }
        if dose == 0.0 {
            return Ok(1);
        }
        let below = self.edges.iter().filter(|e| **e <= dose).count();
        Ok((2 + below).min(DOSE_BINS))
    }

    pub fn representative(&self, bin: usize) -> Result<f64, DiscretizeError> {
        if !(1..=DOSE_BINS).contains(&bin) {
            return Err(DiscretizeError::InvalidAction { action: bin });
        }
        Ok(self.representative[bin - 1])
    }
}

/// k-means diagnostics preserved in the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Everything needed to map raw timesteps to (state, action) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationModel {
    pub schema: CohortSchema,
    pub scaler: Scaler,
    /// `s_count` centroids in scaled feature space; state `s` is centroid
    /// `s - 1`.
    pub centroids: Vec<Vec<f64>>,
    pub fluid: DoseBins,
    pub vaso: DoseBins,
    pub s_count: usize,
    pub seed: u64,
    pub fit_stats: FitStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitWarning {
    /// Feature was constant in training; its scale is floored to 1.
    DegenerateFeature { index: usize, name: String },
    /// The winning k-means restart hit the iteration cap.
    KMeansNotConverged { iterations: usize },
}

#[derive(Debug, Clone)]
pub struct DiscretizerConfig {
    pub s_count: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Explicit positive-dose edges; fitted from data when absent.
    pub fluid_edges: Option<[f64; 4]>,
    pub vaso_edges: Option<[f64; 4]>,
}

impl DiscretizerConfig {
    pub fn new(s_count: usize, seed: u64) -> Self {
        DiscretizerConfig {
            s_count,
            seed,
            restarts: 32,
            max_iter: 300,
            fluid_edges: None,
            vaso_edges: None,
        }
    }
}

/// One discretized timestep: `state` in 1..=s_count, `action` in 1..=25.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteStep {
    pub state: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePatient {
    pub patient_id: String,
    pub outcome: Outcome,
    pub steps: Vec<DiscreteStep>,
}

/// A cohort after discretization; the input to estimation and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDataset {
    pub s_count: usize,
    pub a_count: usize,
    pub patients: Vec<DiscretePatient>,
}

impl DiscreteDataset {
    pub fn timestep_count(&self) -> usize {
        self.patients.iter().map(|p| p.steps.len()).sum()
    }

    /// Empirical distribution of first states, as a length-`s_count` vector.
    pub fn initial_state_distribution(&self) -> Result<Vec<f64>, DiscretizeError> {
        if self.patients.is_empty() {
            return Err(DiscretizeError::EmptyDataset);
        }
        let mut counts = vec![0u64; self.s_count];
        for p in &self.patients {
            let first = p.steps.first().ok_or(DiscretizeError::EmptyDataset)?;
            counts[first.state - 1] += 1;
        }
        let n = self.patients.len() as f64;
        Ok(counts.into_iter().map(|c| c as f64 / n).collect())
    }
}

/// Joint action for a (fluid, vaso) dose pair.
pub fn encode_action(
    fluid_bins: &DoseBins,
    vaso_bins: &DoseBins,
    fluid: f64,
    vaso: f64,
) -> Result<usize, DiscretizeError> {
    let fb = fluid_bins.bin(fluid)?;
    let vb = vaso_bins.bin(vaso)?;
    Ok(DOSE_BINS * (fb - 1) + vb)
}

/// Inverse of the grid layout: action -> (fluid_bin, vaso_bin).
pub fn decode_action(action: usize) -> Result<(usize, usize), DiscretizeError> {
    if !(1..=ACTION_COUNT).contains(&action) {
        return Err(DiscretizeError::InvalidAction { action });
    }
    Ok(((action - 1) / DOSE_BINS + 1, (action - 1) % DOSE_BINS + 1))
}

impl DiscretizationModel {
    /// Nearest-centroid state for a raw feature vector (1-based; ties go to
    /// the lowest state index).
    pub fn assign_state(&self, x: &[f64]) -> Result<usize, DiscretizeError> {
        if x.len() != self.schema.dim {
            return Err(DiscretizeError::DimensionMismatch {
                got: x.len(),
                expected: self.schema.dim,
            });
        }
        if let Some(c) = x.iter().position(|v| !v.is_finite()) {
            return Err(DiscretizeError::NonFiniteInput { component: c });
        }
        let scaled = self.scaler.apply(x);
        Ok(kmeans::nearest(&self.centroids, &scaled) + 1)
    }

    pub fn encode_action(&self, fluid: f64, vaso: f64) -> Result<usize, DiscretizeError> {
        encode_action(&self.fluid, &self.vaso, fluid, vaso)
    }

    pub fn bins(&self, axis: DrugAxis) -> &DoseBins {
        match axis {
            DrugAxis::Fluid => &self.fluid,
            DrugAxis::Vaso => &self.vaso,
        }
    }

    /// Representative dose a policy action implies on one drug axis.
    pub fn action_dose(&self, action: usize, axis: DrugAxis) -> Result<f64, DiscretizeError> {
        let (fb, vb) = decode_action(action)?;
        match axis {
            DrugAxis::Fluid => self.fluid.representative(fb),
            DrugAxis::Vaso => self.vaso.representative(vb),
        }
    }
}

/// Fit scaler, k-means states, and dose bins on a training cohort.
pub fn fit_discretizer(
    train: &Cohort,
    cfg: &DiscretizerConfig,
) -> Result<(DiscretizationModel, Vec<FitWarning>), DiscretizeError> {
    if cfg.s_count == 0 {
        return Err(DiscretizeError::InvalidConfig {
            message: "s_count must be positive".into(),
        });
    }
    let dim = train.schema.dim;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(train.timestep_count());
    for traj in &train.trajectories {
        for step in &traj.steps {
            if step.features.len() != dim {
                return Err(DiscretizeError::InTrajectory {
                    patient_id: traj.patient_id.clone(),
                    source: Box::new(DiscretizeError::DimensionMismatch {
                        got: step.features.len(),
                        expected: dim,
                    }),
                });
            }
            if let Some(c) = step.features.iter().position(|v| !v.is_finite()) {
                return Err(DiscretizeError::InTrajectory {
                    patient_id: traj.patient_id.clone(),
                    source: Box::new(DiscretizeError::NonFiniteInput { component: c }),
                });
            }
            points.push(step.features.clone());
        }
    }
    if points.is_empty() {
        return Err(DiscretizeError::EmptyDataset);
    }

    let (scaler, degenerate) = Scaler::fit(&points, dim);
    let mut warnings: Vec<FitWarning> = degenerate
        .into_iter()
        .map(|i| FitWarning::DegenerateFeature {
            index: i,
            name: train.schema.feature_names[i].clone(),
        })
        .collect();

    let scaled: Vec<Vec<f64>> = points.iter().map(|p| scaler.apply(p)).collect();
    let fit = kmeans::fit(
        &scaled,
        &KMeansConfig {
            k: cfg.s_count,
            max_iter: cfg.max_iter,
            restarts: cfg.restarts,
            seed: cfg.seed,
        },
    )?;
    if !fit.converged {
        warnings.push(FitWarning::KMeansNotConverged {
            iterations: fit.iterations,
        });
    }

    let fluid = fit_dose_bins(train, DrugAxis::Fluid, cfg.fluid_edges)?;
    let vaso = fit_dose_bins(train, DrugAxis::Vaso, cfg.vaso_edges)?;

    Ok((
        DiscretizationModel {
            schema: train.schema.clone(),
            scaler,
            centroids: fit.centroids,
            fluid,
            vaso,
            s_count: cfg.s_count,
            seed: cfg.seed,
            fit_stats: FitStats {
                objective: fit.objective,
                iterations: fit.iterations,
                converged: fit.converged,
            },
        },
        warnings,
    ))
}

fn axis_dose(axis: DrugAxis, step: &crate::cohort::Timestep) -> f64 {
    match axis {
        DrugAxis::Fluid => step.fluid,
        DrugAxis::Vaso => step.vaso,
    }
}

fn fit_dose_bins(
    train: &Cohort,
    axis: DrugAxis,
    explicit: Option<[f64; 4]>,
) -> Result<DoseBins, DiscretizeError> {
    let mut doses: Vec<f64> = Vec::new();
    for traj in &train.trajectories {
        for step in &traj.steps {
            let d = axis_dose(axis, step);
            if !d.is_finite() {
                return Err(DiscretizeError::InTrajectory {
                    patient_id: traj.patient_id.clone(),
                    source: Box::new(DiscretizeError::NonFiniteDose),
                });
            }
            if d < 0.0 {
                return Err(DiscretizeError::InTrajectory {
                    patient_id: traj.patient_id.clone(),
                    source: Box::new(DiscretizeError::NegativeDose { value: d }),
                });
            }
            doses.push(d);
        }
    }

    let edges = match explicit {
        Some(edges) => {
            validate_edges(axis, &edges)?;
            edges
        }
        None => derive_edges(axis, &doses)?,
    };

    // Representative dose: bin 1 is exactly zero; other bins take the median
    // training dose, or the midpoint of the edge interval if (under explicit
    // edges) a bin received no training doses.
    let probe = DoseBins {
        edges,
        representative: [0.0; 5],
    };
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); DOSE_BINS];
    for &d in &doses {
        if d > 0.0 {
            let b = probe.bin(d)?;
            per_bin[b - 1].push(d);
        }
    }
    let mut representative = [0.0f64; 5];
    for b in 2..=DOSE_BINS {
        representative[b - 1] = match median(&mut per_bin[b - 1]) {
            Some(m) => m,
            None => match b {
                2 => edges[0] / 2.0,
                3 => (edges[0] + edges[1]) / 2.0,
                4 => (edges[1] + edges[2]) / 2.0,
                _ => (edges[2] + edges[3]) / 2.0,
            },
        };
    }
    Ok(DoseBins {
        edges,
        representative,
    })
}

fn validate_edges(axis: DrugAxis, edges: &[f64; 4]) -> Result<(), DiscretizeError> {
    if edges.iter().any(|e| !e.is_finite() || *e <= 0.0) {
        return Err(DiscretizeError::InvalidEdges {
            axis,
            message: format!("edges must be positive and finite, got {edges:?}"),
        });
    }
    if !edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(DiscretizeError::InvalidEdges {
            axis,
            message: format!("edges must be strictly increasing, got {edges:?}"),
        });
    }
    Ok(())
}

/// Quartile-targeted edges between distinct positive dose values (module
/// docs describe the rule).
fn derive_edges(axis: DrugAxis, doses: &[f64]) -> Result<[f64; 4], DiscretizeError> {
    let mut positive: Vec<f64> = doses.iter().copied().filter(|d| *d > 0.0).collect();
    if positive.is_empty() {
        return Err(DiscretizeError::InvalidEdges {
            axis,
            message: "no strictly positive doses; cannot derive quartile edges".into(),
        });
    }
    positive.sort_by(f64::total_cmp);
    let n = positive.len();

    // Distinct values with cumulative counts.
    let mut values: Vec<f64> = Vec::new();
    let mut cum: Vec<usize> = Vec::new();
    for &d in &positive {
        match values.last() {
            Some(&v) if v == d => *cum.last_mut().expect("non-empty") += 1,
            _ => {
                let base = cum.last().copied().unwrap_or(0);
                values.push(d);
                cum.push(base + 1);
            }
        }
    }
    let m = values.len();
    if m < 4 {
        return Err(DiscretizeError::InvalidEdges {
            axis,
            message: format!(
                "only {m} distinct positive dose values; need at least 4 for quartile bins"
            ),
        });
    }

    // Candidate boundaries: midpoints between consecutive distinct values.
    // cum[j] doses lie at or below boundary j.
    let boundaries: Vec<f64> = (0..m - 1)
        .map(|j| (values[j] + values[j + 1]) / 2.0)
        .collect();
    let mut chosen = [0usize; 3];
    let mut lo = 0usize;
    for k in 1..=3usize {
        let target = k as f64 * n as f64 / 4.0;
        let hi = boundaries.len() - (3 - k); // leave room for the remaining edges
        let mut best = lo;
        let mut best_dist = f64::INFINITY;
        for (j, _) in boundaries.iter().enumerate().take(hi).skip(lo) {
            let dist = (cum[j] as f64 - target).abs();
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        chosen[k - 1] = best;
        lo = best + 1;
    }
    let edges = [
        boundaries[chosen[0]],
        boundaries[chosen[1]],
        boundaries[chosen[2]],
        values[m - 1],
    ];
    validate_edges(axis, &edges)?;
    Ok(edges)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        Some(values[n / 2])
    } else {
        Some((values[n / 2 - 1] + values[n / 2]) / 2.0)
    }
}

/// Map every trajectory through the model. Parallel over trajectories; the
/// first error in cohort order is reported.
pub fn discretize_cohort(
    model: &DiscretizationModel,
    cohort: &Cohort,
) -> Result<DiscreteDataset, DiscretizeError> {
    let results: Vec<Result<DiscretePatient, DiscretizeError>> = cohort
        .trajectories
        .par_iter()
        .map(|traj| {
            let mut steps = Vec::with_capacity(traj.steps.len());
            for step in &traj.steps {
                let state = model.assign_state(&step.features).map_err(|e| {
                    DiscretizeError::InTrajectory {
                        patient_id: traj.patient_id.clone(),
                        source: Box::new(e),
                    }
                })?;
                let action = model.encode_action(step.fluid, step.vaso).map_err(|e| {
                    DiscretizeError::InTrajectory {
                        patient_id: traj.patient_id.clone(),
                        source: Box::new(e),
                    }
                })?;
                steps.push(DiscreteStep { state, action });
            }
            Ok(DiscretePatient {
                patient_id: traj.patient_id.clone(),
                outcome: traj.outcome,
                steps,
            })
        })
        .collect();
    let mut patients = Vec::with_capacity(results.len());
    for r in results {
        patients.push(r?);
    }
    Ok(DiscreteDataset {
        s_count: model.s_count,
        a_count: ACTION_COUNT,
        patients,
    })
}

pub fn save_model(model: &DiscretizationModel, path: &Path) -> Result<(), DiscretizeError> {
    let file = File::create(path).map_err(|e| DiscretizeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_string_pretty(model).expect("model serializes");
    w.write_all(json.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| DiscretizeError::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn load_model(path: &Path) -> Result<DiscretizationModel, DiscretizeError> {
    let text = std::fs::read_to_string(path).map_err(|e| DiscretizeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let model: DiscretizationModel =
        serde_json::from_str(&text).map_err(|e| DiscretizeError::Malformed {
            message: e.to_string(),
        })?;
    if model.centroids.len() != model.s_count {
        return Err(DiscretizeError::Malformed {
            message: format!(
                "artifact has {} centroids but declares s_count {}",
                model.centroids.len(),
                model.s_count
            ),
        });
    }
    Ok(model)
}

/// Distinct (state, action) pairs observed in a dataset — mostly a test and
/// reporting helper.
pub fn observed_pairs(d: &DiscreteDataset) -> BTreeSet<(usize, usize)> {
    let mut set = BTreeSet::new();
    for p in &d.patients {
        for s in &p.steps {
            set.insert((s.state, s.action));
        }
    }
    set
}
