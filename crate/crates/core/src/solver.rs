//! Policies and planning on the estimated MDP.
//!
//! `solve_optimal` runs synchronous value iteration that maximizes only
//! over *allowed* (state, action) pairs — pairs observed at least
//! `prune_min_count` times — so the learned policy can never recommend a
//! treatment the data barely supports. Absorbing targets contribute their
//! terminal reward and have value zero, hence every state value is bounded
//! by the reward magnitude.
//!
//! Ties in the Bellman argmax break toward the lowest action index, making
//! solutions deterministic functions of the model alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Row, TabularMdp};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("states with no allowed action and no fallback configured: {states:?}")]
    NoAllowedAction { states: Vec<usize> },
    #[error("policy puts probability on unobserved pair (state {state}, action {action})")]
    UnobservedSupport { state: usize, action: usize },
    #[error("shape mismatch: {message}")]
    ShapeMismatch { message: String },
    #[error("invalid policy: {message}")]
    InvalidPolicy { message: String },
    #[error("invalid solver config: {message}")]
    InvalidConfig { message: String },
}

/// A treatment policy over 1-based states and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// `actions[s - 1]` is the action taken in state `s`.
    Deterministic { actions: Vec<usize> },
    /// `probs[s - 1][a - 1]` is the probability of action `a` in state `s`.
    Stochastic { probs: Vec<Vec<f64>> },
}

impl Policy {
    pub fn s_count(&self) -> usize {
        match self {
            Policy::Deterministic { actions } => actions.len(),
            Policy::Stochastic { probs } => probs.len(),
        }
    }

    /// Probability of taking `a` in `s`.
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic { actions } => {
                if actions[s - 1] == a {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic { probs } => probs[s - 1].get(a - 1).copied().unwrap_or(0.0),
        }
    }

    /// The single action in `s` for deterministic policies, `None` otherwise.
    pub fn action(&self, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic { actions } => Some(actions[s - 1]),
            Policy::Stochastic { .. } => None,
        }
    }

    /// Structural validation against an action-space size.
    pub fn validate(&self, a_count: usize) -> Result<(), SolverError> {
        match self {
            Policy::Deterministic { actions } => {
                for (i, &a) in actions.iter().enumerate() {
                    if !(1..=a_count).contains(&a) {
                        return Err(SolverError::InvalidPolicy {
                            message: format!(
                                "state {}: action {} outside 1..={}",
                                i + 1,
                                a,
                                a_count
                            ),
                        });
                    }
                }
            }
            Policy::Stochastic { probs } => {
                for (i, row) in probs.iter().enumerate() {
                    if row.len() != a_count {
                        return Err(SolverError::InvalidPolicy {
                            message: format!(
                                "state {}: row has {} entries, expected {}",
                                i + 1,
                                row.len(),
                                a_count
                            ),
                        });
                    }
                    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                        return Err(SolverError::InvalidPolicy {
                            message: format!(
                                "state {}: probabilities must be finite and non-negative",
                                i + 1
                            ),
                        });
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(SolverError::InvalidPolicy {
                            message: format!("state {}: probabilities sum to {sum}", i + 1),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// State values plus per-pair action values. `q[s-1][a-1]` is `None` where
/// the value is unavailable (disallowed pair for the optimizer, unobserved
/// pair for policy evaluation) — unavailability is explicit, never a zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub v: Vec<f64>,
    pub q: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change per sweep; contraction makes this non-increasing.
    pub delta_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Action assigned to states with no allowed pair (their value is pinned
    /// to 0, a neutral "no information" value). `None` makes such states a
    /// hard error.
    pub fallback_action: Option<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            tol: 1e-8,
            max_iter: 100_000,
            fallback_action: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub policy: Policy,
    pub values: ValueFunction,
    pub info: SolveInfo,
}

/// Empirical clinician policy: row-normalized action counts per state.
/// States never visited get a uniform row and are returned as warnings.
pub fn behavior_policy(m: &TabularMdp) -> (Policy, Vec<usize>) {
    let s_count = m.s_count();
    let a_count = m.a_count();
    let mut probs = vec![vec![0.0; a_count]; s_count];
    let mut orphans = Vec::new();
    for s in 1..=s_count {
        let counts: Vec<u64> = (1..=a_count)
            .map(|a| m.row_ref(s, a).map_or(0, |r| r.total))
            .collect();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            orphans.push(s);
            for p in probs[s - 1].iter_mut() {
                *p = 1.0 / a_count as f64;
            }
        } else {
            for (p, c) in probs[s - 1].iter_mut().zip(counts.iter()) {
                *p = *c as f64 / total as f64;
            }
        }
    }
    (Policy::Stochastic { probs }, orphans)
}

/// The "never treat" reference policy: action 1 (both dose bins zero) in
/// every state.
pub fn zero_drug_policy(s_count: usize) -> Policy {
    Policy::Deterministic {
        actions: vec![1; s_count],
    }
}

fn q_from_row(m: &TabularMdp, row: &Row, v: &[f64]) -> f64 {
    let gamma = m.config().gamma;
    let mut q = 0.0;
    for ((target, _), p) in row.targets.iter().zip(row.probs.iter()) {
        let t = *target as usize;
        q += p * if m.is_live_target(t) {
            gamma * v[t - 1]
        } else {
            m.target_reward(t)
        };
    }
    q
}

/// Safety-constrained value iteration.
///
/// Hitting `max_iter` is not an error: the result is returned with
/// `info.converged == false` so callers can decide.
pub fn solve_optimal(m: &TabularMdp, cfg: &SolveConfig) -> Result<Solution, SolverError> {
    if !(cfg.tol > 0.0 && cfg.tol.is_finite()) || cfg.max_iter == 0 {
        return Err(SolverError::InvalidConfig {
            message: format!("tol {} / max_iter {}", cfg.tol, cfg.max_iter),
        });
    }
    if let Some(f) = cfg.fallback_action {
        if !(1..=m.a_count()).contains(&f) {
            return Err(SolverError::InvalidConfig {
                message: format!("fallback action {f} outside 1..={}", m.a_count()),
            });
        }
    }
    let s_count = m.s_count();
    let a_count = m.a_count();

    let allowed: Vec<Vec<usize>> = (1..=s_count)
        .map(|s| (1..=a_count).filter(|&a| m.allowed_ref(s, a)).collect())
        .collect();
    let stuck: Vec<usize> = (1..=s_count)
        .filter(|&s| allowed[s - 1].is_empty())
        .collect();
    if !stuck.is_empty() && cfg.fallback_action.is_none() {
        return Err(SolverError::NoAllowedAction { states: stuck });
    }

    let mut v = vec![0.0f64; s_count];
    let mut delta_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut next = vec![0.0f64; s_count];
        for s in 1..=s_count {
            if allowed[s - 1].is_empty() {
                continue; // pinned to 0 under the fallback
            }
            let mut best = f64::NEG_INFINITY;
            for &a in &allowed[s - 1] {
                let row = m.row_ref(s, a).expect("allowed implies observed");
                let q = q_from_row(m, row, &v);
                if q > best {
                    best = q;
                }
            }
            next[s - 1] = best;
        }
        let delta = v
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        delta_history.push(delta);
        v = next;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    // Greedy extraction; strict `>` keeps the lowest action index on ties.
    let mut actions = vec![0usize; s_count];
    let mut q_table: Vec<Vec<Option<f64>>> = vec![vec![None; a_count]; s_count];
    for s in 1..=s_count {
        if allowed[s - 1].is_empty() {
            actions[s - 1] = cfg.fallback_action.expect("checked above");
            continue;
        }
        let mut best_a = 0usize;
        let mut best_q = f64::NEG_INFINITY;
        for &a in &allowed[s - 1] {
            let row = m.row_ref(s, a).expect("allowed implies observed");
            let q = q_from_row(m, row, &v);
            q_table[s - 1][a - 1] = Some(q);
            if q > best_q {
                best_q = q;
                best_a = a;
            }
        }
        actions[s - 1] = best_a;
    }

    let policy = Policy::Deterministic { actions };
    debug_assert!(v
        .iter()
        .all(|x| x.abs() <= m.config().reward_magnitude + 1e-9));
    Ok(Solution {
        policy,
        values: ValueFunction { v, q: q_table },
        info: SolveInfo {
            iterations,
            converged,
            delta_history,
        },
    })
}

/// Model-based evaluation of an arbitrary policy on the estimated MDP.
///
/// Requires the policy's support to be observed: probability on an
/// unobserved pair of a visited state is an `UnobservedSupport` error.
/// States with no observed action at all are inert (value 0); they cannot
/// be a transition target of any observed row, so they never influence the
/// reachable values.
pub fn policy_value_model_based(
    m: &TabularMdp,
    policy: &Policy,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueFunction, SolveInfo), SolverError> {
    if policy.s_count() != m.s_count() {
        return Err(SolverError::ShapeMismatch {
            message: format!(
                "policy covers {} states, model has {}",
                policy.s_count(),
                m.s_count()
            ),
        });
    }
    if !(tol > 0.0 && tol.is_finite()) || max_iter == 0 {
        return Err(SolverError::InvalidConfig {
            message: format!("tol {tol} / max_iter {max_iter}"),
        });
    }
    policy.validate(m.a_count())?;
    let s_count = m.s_count();
    let a_count = m.a_count();

    // Support check up front so failures are loud and early.
    let mut live: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s_count]; // (action, pi) with pi > 0
    for s in 1..=s_count {
        let observed_any = (1..=a_count).any(|a| m.row_ref(s, a).is_some());
        for a in 1..=a_count {
            let p = policy.prob(s, a);
            if p > 0.0 {
                if m.row_ref(s, a).is_none() {
                    if observed_any {
                        return Err(SolverError::UnobservedSupport {
                            state: s,
                            action: a,
                        });
                    }
                    // Inert state: no data at all; leave value at 0.
                } else {
                    live[s - 1].push((a, p));
                }
            }
        }
    }

    let mut v = vec![0.0f64; s_count];
    let mut delta_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut next = vec![0.0f64; s_count];
        for s in 1..=s_count {
            let mut acc = 0.0;
            for &(a, p) in &live[s - 1] {
                let row = m.row_ref(s, a).expect("validated support");
                acc += p * q_from_row(m, row, &v);
            }
            next[s - 1] = acc;
        }
        let delta = v
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        delta_history.push(delta);
        v = next;
        if delta < tol {
            converged = true;
            break;
        }
    }

    let mut q_table: Vec<Vec<Option<f64>>> = vec![vec![None; a_count]; s_count];
    for s in 1..=s_count {
        for a in 1..=a_count {
            if let Some(row) = m.row_ref(s, a) {
                q_table[s - 1][a - 1] = Some(q_from_row(m, row, &v));
            }
        }
    }
    Ok((
        ValueFunction { v, q: q_table },
        SolveInfo {
            iterations,
            converged,
            delta_history,
        },
    ))
}

/// Per-state disagreement between two policies over the same state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDiff {
    pub state: usize,
    pub action_a: Option<usize>,
    pub action_b: Option<usize>,
    /// Total variation distance between the two action distributions.
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiff {
    pub disagree_count: usize,
    pub states: Vec<StateDiff>,
}

pub fn policy_diff(a: &Policy, b: &Policy) -> Result<PolicyDiff, SolverError> {
    if a.s_count() != b.s_count() {
        return Err(SolverError::ShapeMismatch {
            message: format!("policies cover {} vs {} states", a.s_count(), b.s_count()),
        });
    }
    let a_count = policy_a_count(a).max(policy_a_count(b));
    let mut states = Vec::with_capacity(a.s_count());
    let mut disagree = 0usize;
    for s in 1..=a.s_count() {
        let mut tv = 0.0;
        for act in 1..=a_count {
            tv += (a.prob(s, act) - b.prob(s, act)).abs();
        }
        tv *= 0.5;
        if tv > 1e-12 {
            disagree += 1;
        }
        states.push(StateDiff {
            state: s,
            action_a: a.action(s),
            action_b: b.action(s),
            tv,
        });
    }
    Ok(PolicyDiff {
        disagree_count: disagree,
        states,
    })
}

fn policy_a_count(p: &Policy) -> usize {
    match p {
        Policy::Deterministic { actions } => actions.iter().copied().max().unwrap_or(1),
        Policy::Stochastic { probs } => probs.iter().map(Vec::len).max().unwrap_or(1),
    }
}
