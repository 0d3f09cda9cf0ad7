//! Off-policy evaluation from logged trajectories.
//!
//! Weighted importance sampling (WIS): each trajectory contributes the
//! product of per-step probability ratios `pi_e(a|s) / pi_b(a|s)` as its
//! weight and the discounted terminal reward as its return; the estimate is
//! the weight-normalized mean. Evaluating the behavior policy against
//! itself makes every ratio exactly 1.0, so the estimate collapses to the
//! plain mean return bit-for-bit — a cheap end-to-end sanity check.
//!
//! The lower confidence bound is a trajectory-level bootstrap percentile:
//! resample trajectories with replacement, recompute WIS, and take the
//! (1 - confidence) quantile. Replicates draw from per-index RNG streams,
//! so results do not depend on thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Outcome;
use crate::discretize::DiscreteDataset;
use crate::seeds::{self, domain};
use crate::solver::{Policy, SolverError};

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("trajectory {patient_id} has no timesteps")]
    EmptyTrajectory { patient_id: String },
    #[error("shape mismatch: {message}")]
    ShapeMismatch { message: String },
    #[error("trajectory {patient_id}: {what} {got} outside 1..={max}")]
    IndexOutOfRange {
        patient_id: String,
        what: &'static str,
        got: usize,
        max: usize,
    },
    #[error("behavior policy assigns probability 0 to logged (state {state}, action {action}) in trajectory {patient_id}")]
    ZeroBehaviorProb {
        patient_id: String,
        state: usize,
        action: usize,
    },
    #[error("importance weight overflowed in trajectory {patient_id}")]
    NumericOverflow { patient_id: String },
    #[error("no overlap: every importance weight is zero")]
    NoOverlap,
    #[error("every bootstrap resample had zero total weight")]
    AllResamplesDegenerate,
    #[error("invalid parameter: {message}")]
    InvalidParam { message: String },
    #[error("agreement analysis requires a deterministic policy")]
    PolicyNotDeterministic,
    #[error(transparent)]
    Policy(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    /// One-sided confidence level of the lower bound, e.g. 0.90.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 2000,
            confidence: 0.90,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<(), OpeError> {
        if self.resamples == 0 {
            return Err(OpeError::InvalidParam {
                message: "resamples must be positive".into(),
            });
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(OpeError::InvalidParam {
                message: format!("confidence {} outside (0, 1)", self.confidence),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBound {
    pub lower: f64,
    pub confidence: f64,
    pub resamples: usize,
    /// Resamples whose total weight was zero; excluded from the quantile.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub point_estimate: f64,
    /// Kish effective sample size (sum w)^2 / sum w^2.
    pub ess: f64,
    pub trajectory_count: usize,
    pub nonzero_weight_fraction: f64,
    pub weights: Vec<f64>,
    pub returns: Vec<f64>,
    pub bootstrap: Option<BootstrapBound>,
}

fn validate_common(
    d: &DiscreteDataset,
    behavior: &Policy,
    target: &Policy,
    gamma: f64,
    reward_magnitude: f64,
) -> Result<(), OpeError> {
    if d.patients.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(OpeError::InvalidParam {
            message: format!("gamma {gamma} outside (0, 1]"),
        });
    }
    if !(reward_magnitude > 0.0 && reward_magnitude.is_finite()) {
        return Err(OpeError::InvalidParam {
            message: format!("reward_magnitude {reward_magnitude} must be positive"),
        });
    }
    for (name, p) in [("behavior", behavior), ("target", target)] {
        if p.s_count() != d.s_count {
            return Err(OpeError::ShapeMismatch {
                message: format!(
                    "{name} policy covers {} states, dataset has {}",
                    p.s_count(),
                    d.s_count
                ),
            });
        }
        p.validate(d.a_count)?;
    }
    Ok(())
}

/// Weighted importance sampling estimate of the target policy's value,
/// optionally with a bootstrap percentile lower bound.
pub fn wis_evaluate(
    d: &DiscreteDataset,
    behavior: &Policy,
    target: &Policy,
    gamma: f64,
    reward_magnitude: f64,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<OpeReport, OpeError> {
    validate_common(d, behavior, target, gamma, reward_magnitude)?;

    // Per-trajectory weight and return; parallel map, order preserved.
    let per_traj: Vec<Result<(f64, f64), OpeError>> = d
        .patients
        .par_iter()
        .map(|p| {
            if p.steps.is_empty() {
                return Err(OpeError::EmptyTrajectory {
                    patient_id: p.patient_id.clone(),
                });
            }
            let mut w = 1.0f64;
            for step in &p.steps {
                if !(1..=d.s_count).contains(&step.state) {
                    return Err(OpeError::IndexOutOfRange {
                        patient_id: p.patient_id.clone(),
                        what: "state",
                        got: step.state,
                        max: d.s_count,
                    });
                }
                if !(1..=d.a_count).contains(&step.action) {
                    return Err(OpeError::IndexOutOfRange {
                        patient_id: p.patient_id.clone(),
                        what: "action",
                        got: step.action,
                        max: d.a_count,
                    });
                }
                let pb = behavior.prob(step.state, step.action);
                if pb == 0.0 {
                    return Err(OpeError::ZeroBehaviorProb {
                        patient_id: p.patient_id.clone(),
                        state: step.state,
                        action: step.action,
                    });
                }
                w *= target.prob(step.state, step.action) / pb;
            }
            if !w.is_finite() {
                return Err(OpeError::NumericOverflow {
                    patient_id: p.patient_id.clone(),
                });
            }
            let terminal = match p.outcome {
                Outcome::Survived90 => reward_magnitude,
                Outcome::Died90 => -reward_magnitude,
            };
            let g = gamma.powi(p.steps.len() as i32 - 1) * terminal;
            Ok((w, g))
        })
        .collect();

    let mut weights = Vec::with_capacity(per_traj.len());
    let mut returns = Vec::with_capacity(per_traj.len());
    for r in per_traj {
        let (w, g) = r?;
        weights.push(w);
        returns.push(g);
    }

    let point_estimate = wis_point(&weights, &returns).ok_or(OpeError::NoOverlap)?;
    let sum_w: f64 = weights.iter().sum();
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = sum_w * sum_w / sum_w2;
    let nonzero = weights.iter().filter(|w| **w > 0.0).count();
    let n = weights.len();

    let bound = match bootstrap {
        Some(cfg) => Some(bootstrap_lower_bound(&weights, &returns, cfg)?),
        None => None,
    };

    Ok(OpeReport {
        point_estimate,
        ess,
        trajectory_count: n,
        nonzero_weight_fraction: nonzero as f64 / n as f64,
        weights,
        returns,
        bootstrap: bound,
    })
}

/// `sum(w * g) / sum(w)`, or `None` when all weights are zero.
fn wis_point(weights: &[f64], returns: &[f64]) -> Option<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (w, g) in weights.iter().zip(returns.iter()) {
        num += w * g;
        den += w;
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// Trajectory-level bootstrap percentile lower bound on the WIS estimate.
pub fn bootstrap_lower_bound(
    weights: &[f64],
    returns: &[f64],
    cfg: &BootstrapConfig,
) -> Result<BootstrapBound, OpeError> {
    cfg.validate()?;
    if weights.is_empty() || weights.len() != returns.len() {
        return Err(OpeError::ShapeMismatch {
            message: format!("{} weights vs {} returns", weights.len(), returns.len()),
        });
    }
    let n = weights.len();
    let estimates: Vec<Option<f64>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seeds::stream_rng(cfg.seed, domain::BOOTSTRAP_REP, rep as u64);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for _ in 0..n {
                let i = rng.random_range(0..n);
                num += weights[i] * returns[i];
                den += weights[i];
            }
            if den == 0.0 {
                None
            } else {
                Some(num / den)
            }
        })
        .collect();

    let mut kept: Vec<f64> = estimates.iter().filter_map(|e| *e).collect();
    let degenerate = cfg.resamples - kept.len();
    if kept.is_empty() {
        return Err(OpeError::AllResamplesDegenerate);
    }
    kept.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
    let k = kept.len();
    let idx = (((1.0 - cfg.confidence) * k as f64).ceil() as usize)
        .saturating_sub(1)
        .min(k - 1);
    Ok(BootstrapBound {
        lower: kept[idx],
        confidence: cfg.confidence,
        resamples: cfg.resamples,
        degenerate,
    })
}

/// Per-state agreement between a deterministic policy and the logged
/// actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAgreement {
    pub state: usize,
    pub visits: u64,
    pub matches: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub threshold: f64,
    /// One entry per visited state, ascending by state index.
    pub per_state: Vec<StateAgreement>,
    pub visited_count: usize,
    /// Visited states whose agreement fraction is strictly above the
    /// threshold.
    pub above_threshold: usize,
    pub never_visited: Vec<usize>,
    /// Pooled matches / pooled visits.
    pub overall_fraction: f64,
}

pub fn agreement_histogram(
    d: &DiscreteDataset,
    policy: &Policy,
    threshold: f64,
) -> Result<AgreementReport, OpeError> {
    if d.patients.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(OpeError::InvalidParam {
            message: format!("threshold {threshold} outside [0, 1)"),
        });
    }
    if policy.action(1.min(policy.s_count())).is_none() {
        return Err(OpeError::PolicyNotDeterministic);
    }
    if policy.s_count() != d.s_count {
        return Err(OpeError::ShapeMismatch {
            message: format!(
                "policy covers {} states, dataset has {}",
                policy.s_count(),
                d.s_count
            ),
        });
    }
    policy.validate(d.a_count)?;

    let mut visits = vec![0u64; d.s_count];
    let mut matches = vec![0u64; d.s_count];
    for p in &d.patients {
        for step in &p.steps {
            if !(1..=d.s_count).contains(&step.state) {
                return Err(OpeError::IndexOutOfRange {
                    patient_id: p.patient_id.clone(),
                    what: "state",
                    got: step.state,
                    max: d.s_count,
                });
            }
            visits[step.state - 1] += 1;
            if policy.action(step.state) == Some(step.action) {
                matches[step.state - 1] += 1;
            }
        }
    }

    let mut per_state = Vec::new();
    let mut never_visited = Vec::new();
    let mut above = 0usize;
    let mut total_v = 0u64;
    let mut total_m = 0u64;
    for s in 1..=d.s_count {
        let v = visits[s - 1];
        if v == 0 {
            never_visited.push(s);
            continue;
        }
        let m = matches[s - 1];
        let fraction = m as f64 / v as f64;
        if fraction > threshold {
            above += 1;
        }
        total_v += v;
        total_m += m;
        per_state.push(StateAgreement {
            state: s,
            visits: v,
            matches: m,
            fraction,
        });
    }

    Ok(AgreementReport {
        threshold,
        visited_count: per_state.len(),
        above_threshold: above,
        per_state,
        never_visited,
        overall_fraction: total_m as f64 / total_v as f64,
    })
}
