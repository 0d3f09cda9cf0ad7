//! Tabular MDP estimation from discretized trajectories.
//!
//! The model has `s_count` live states plus two absorbing targets appended
//! after them: target `s_count + 1` is discharge (reward `+R`), target
//! `s_count + 2` is death (reward `-R`). Live targets carry zero reward;
//! absorbing states have no outgoing transitions by construction (they are
//! representable only as targets). Every observed timestep contributes
//! exactly one transition: to the next step's state, or to the outcome's
//! absorbing target for the final step.
//!
//! Transition probabilities are the row-normalized counts. A `(state,
//! action)` pair with fewer than `prune_min_count` observations is kept in
//! the counts but marked *not allowed*: the planner never selects it, which
//! is how rarely-attempted treatments are kept out of the learned policy.
//!
//! Rows are stored sparsely and persisted as a small binary artifact
//! (fixed header + count triples); probabilities are recomputed on load, so
//! a round trip is exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::DiscreteDataset;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid estimation config: {message}")]
    InvalidConfig { message: String },
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("patient {patient_id}: trajectory has no steps")]
    EmptyTrajectory { patient_id: String },
    #[error("{what} {got} outside 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        max: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model artifact: {message}")]
    Corrupt { message: String },
}

/// Reward and regularization settings baked into an estimated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    /// Terminal reward magnitude `R`: discharge gets `+R`, death `-R`.
    pub reward_magnitude: f64,
    /// Discount factor in (0, 1].
    pub gamma: f64,
    /// Minimum observations for a (state, action) to be allowed.
    pub prune_min_count: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            reward_magnitude: 100.0,
            gamma: 0.99,
            prune_min_count: 5,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<(), MdpError> {
        if !(self.reward_magnitude.is_finite() && self.reward_magnitude > 0.0) {
            return Err(MdpError::InvalidConfig {
                message: format!(
                    "reward_magnitude must be positive and finite, got {}",
                    self.reward_magnitude
                ),
            });
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MdpError::InvalidConfig {
                message: format!("gamma must be in (0, 1], got {}", self.gamma),
            });
        }
        if self.prune_min_count == 0 {
            return Err(MdpError::InvalidConfig {
                message: "prune_min_count must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// One observed transition row: sparse targets with counts and normalized
/// probabilities, sorted by target id.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    /// (target id, count); target ids are 1..=s_count for live states,
    /// s_count+1 discharge, s_count+2 death.
    pub targets: Vec<(u32, u64)>,
    /// Probabilities aligned with `targets` (count / total).
    pub probs: Vec<f64>,
    pub total: u64,
}

/// Estimated tabular MDP over `s_count` live states and `a_count` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    s_count: usize,
    a_count: usize,
    config: EstimateConfig,
    /// Indexed by `(s - 1) * a_count + (a - 1)`; `None` = never observed.
    rows: Vec<Option<Row>>,
}

impl TabularMdp {
    pub fn s_count(&self) -> usize {
        self.s_count
    }

    pub fn a_count(&self) -> usize {
        self.a_count
    }

    pub fn config(&self) -> &EstimateConfig {
        &self.config
    }

    /// Discharge target id (`s_count + 1`).
    pub fn discharge_target(&self) -> usize {
        self.s_count + 1
    }

    /// Death target id (`s_count + 2`).
    pub fn death_target(&self) -> usize {
        self.s_count + 2
    }

    /// Terminal reward collected on entering a target.
    pub fn target_reward(&self, target: usize) -> f64 {
        if target == self.discharge_target() {
            self.config.reward_magnitude
        } else if target == self.death_target() {
            -self.config.reward_magnitude
        } else {
            0.0
        }
    }

    pub fn is_live_target(&self, target: usize) -> bool {
        (1..=self.s_count).contains(&target)
    }

    fn check_sa(&self, s: usize, a: usize) -> Result<(), MdpError> {
        if !(1..=self.s_count).contains(&s) {
            return Err(MdpError::IndexOutOfRange {
                what: "state",
                got: s,
                max: self.s_count,
            });
        }
        if !(1..=self.a_count).contains(&a) {
            return Err(MdpError::IndexOutOfRange {
                what: "action",
                got: a,
                max: self.a_count,
            });
        }
        Ok(())
    }

    /// Sparse row access; `None` means the pair was never observed.
    pub fn row(&self, s: usize, a: usize) -> Result<Option<&Row>, MdpError> {
        self.check_sa(s, a)?;
        Ok(self.rows[(s - 1) * self.a_count + (a - 1)].as_ref())
    }

    pub(crate) fn row_ref(&self, s: usize, a: usize) -> Option<&Row> {
        self.rows[(s - 1) * self.a_count + (a - 1)].as_ref()
    }

    /// Observation count for a pair (0 when unobserved).
    pub fn sa_count(&self, s: usize, a: usize) -> Result<u64, MdpError> {
        Ok(self.row(s, a)?.map_or(0, |r| r.total))
    }

    /// Whether the planner may select `(s, a)`: observed at least
    /// `prune_min_count` times.
    pub fn allowed(&self, s: usize, a: usize) -> Result<bool, MdpError> {
        Ok(self
            .row(s, a)?
            .is_some_and(|r| r.total >= self.config.prune_min_count))
    }

    pub(crate) fn allowed_ref(&self, s: usize, a: usize) -> bool {
        self.row_ref(s, a)
            .is_some_and(|r| r.total >= self.config.prune_min_count)
    }

    /// Dense probability vector over the `s_count + 2` targets, or `None`
    /// when the pair is unobserved — never a silently-zero vector.
    /// Position `i` (0-based) holds the probability of target id `i + 1`.
    pub fn transition_row(&self, s: usize, a: usize) -> Result<Option<Vec<f64>>, MdpError> {
        Ok(self.row(s, a)?.map(|row| {
            let mut dense = vec![0.0; self.s_count + 2];
            for ((t, _), p) in row.targets.iter().zip(row.probs.iter()) {
                dense[*t as usize - 1] = *p;
            }
            dense
        }))
    }

    /// All observed `(s, a, row)` triples in index order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, &Row)> {
        self.rows.iter().enumerate().filter_map(move |(i, r)| {
            r.as_ref()
                .map(|row| (i / self.a_count + 1, i % self.a_count + 1, row))
        })
    }

    /// Total observed transitions (= timesteps tallied).
    pub fn total_transitions(&self) -> u64 {
        self.rows.iter().flatten().map(|r| r.total).sum()
    }

    /// States with zero outgoing observations.
    pub fn orphan_states(&self) -> Vec<usize> {
        (1..=self.s_count)
            .filter(|&s| (1..=self.a_count).all(|a| self.row_ref(s, a).is_none()))
            .collect()
    }

    /// Build from explicit count triples `(s, a, target, count)`.
    pub fn from_counts(
        s_count: usize,
        a_count: usize,
        config: EstimateConfig,
        triples: &[(usize, usize, usize, u64)],
    ) -> Result<TabularMdp, MdpError> {
        config.validate()?;
        if s_count == 0 || a_count == 0 {
            return Err(MdpError::InvalidConfig {
                message: "s_count and a_count must be positive".into(),
            });
        }
        let mut tally: BTreeMap<(u32, u32), BTreeMap<u32, u64>> = BTreeMap::new();
        for &(s, a, target, count) in triples {
            if !(1..=s_count).contains(&s) {
                return Err(MdpError::IndexOutOfRange {
                    what: "state",
                    got: s,
                    max: s_count,
                });
            }
            if !(1..=a_count).contains(&a) {
                return Err(MdpError::IndexOutOfRange {
                    what: "action",
                    got: a,
                    max: a_count,
                });
            }
            if !(1..=s_count + 2).contains(&target) {
                return Err(MdpError::IndexOutOfRange {
                    what: "target",
                    got: target,
                    max: s_count + 2,
                });
            }
            if count == 0 {
                continue;
            }
            *tally
                .entry((s as u32, a as u32))
                .or_default()
                .entry(target as u32)
                .or_default() += count;
        }
        Ok(Self::from_tally(s_count, a_count, config, tally))
    }

    fn from_tally(
        s_count: usize,
        a_count: usize,
        config: EstimateConfig,
        tally: BTreeMap<(u32, u32), BTreeMap<u32, u64>>,
    ) -> TabularMdp {
        let mut rows: Vec<Option<Row>> = vec![None; s_count * a_count];
        for ((s, a), targets) in tally {
            let total: u64 = targets.values().sum();
            let pairs: Vec<(u32, u64)> = targets.into_iter().collect();
            let probs: Vec<f64> = pairs
                .iter()
                .map(|(_, c)| *c as f64 / total as f64)
                .collect();
            debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            rows[(s as usize - 1) * a_count + (a as usize - 1)] = Some(Row {
                targets: pairs,
                probs,
                total,
            });
        }
        TabularMdp {
            s_count,
            a_count,
            config,
            rows,
        }
    }
}

/// Tally a discretized dataset into a tabular MDP.
///
/// Returns the model plus the list of orphan states (no outgoing
/// observations) as a warning, not an error. Tallying is pure counting, so
/// the result is invariant to trajectory order.
pub fn estimate_mdp(
    d: &DiscreteDataset,
    config: EstimateConfig,
) -> Result<(TabularMdp, Vec<usize>), MdpError> {
    config.validate()?;
    if d.s_count == 0 || d.a_count == 0 {
        return Err(MdpError::InvalidConfig {
            message: "dataset s_count and a_count must be positive".into(),
        });
    }
    if d.patients.is_empty() {
        return Err(MdpError::EmptyDataset);
    }
    let discharge = (d.s_count + 1) as u32;
    let death = (d.s_count + 2) as u32;

    let mut tally: BTreeMap<(u32, u32), BTreeMap<u32, u64>> = BTreeMap::new();
    for patient in &d.patients {
        if patient.steps.is_empty() {
            return Err(MdpError::EmptyTrajectory {
                patient_id: patient.patient_id.clone(),
            });
        }
        for (i, step) in patient.steps.iter().enumerate() {
            if !(1..=d.s_count).contains(&step.state) {
                return Err(MdpError::IndexOutOfRange {
                    what: "state",
                    got: step.state,
                    max: d.s_count,
                });
            }
            if !(1..=d.a_count).contains(&step.action) {
                return Err(MdpError::IndexOutOfRange {
                    what: "action",
                    got: step.action,
                    max: d.a_count,
                });
            }
            let target: u32 = match patient.steps.get(i + 1) {
                Some(next) => {
                    if !(1..=d.s_count).contains(&next.state) {
                        return Err(MdpError::IndexOutOfRange {
                            what: "state",
                            got: next.state,
                            max: d.s_count,
                        });
                    }
                    next.state as u32
                }
                None => match patient.outcome {
                    crate::cohort::Outcome::Survived90 => discharge,
                    crate::cohort::Outcome::Died90 => death,
                },
            };
            *tally
                .entry((step.state as u32, step.action as u32))
                .or_default()
                .entry(target)
                .or_default() += 1;
        }
    }
    let mdp = TabularMdp::from_tally(d.s_count, d.a_count, config, tally);
    let orphans = mdp.orphan_states();
    Ok((mdp, orphans))
}

const MAGIC: [u8; 8] = *b"DOSEMDP1";

/// Write the binary artifact: header (magic, dimensions, config) followed by
/// sparse count triples in row order.
pub fn save_binary(mdp: &TabularMdp, path: &Path) -> Result<(), MdpError> {
    let io = |e| MdpError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let n_triples: u64 = mdp
        .rows
        .iter()
        .flatten()
        .map(|r| r.targets.len() as u64)
        .sum();
    w.write_all(&MAGIC).map_err(io)?;
    for v in [mdp.s_count as u64, mdp.a_count as u64] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&mdp.config.reward_magnitude.to_le_bytes())
        .map_err(io)?;
    w.write_all(&mdp.config.gamma.to_le_bytes()).map_err(io)?;
    w.write_all(&mdp.config.prune_min_count.to_le_bytes())
        .map_err(io)?;
    w.write_all(&n_triples.to_le_bytes()).map_err(io)?;
    for (s, a, row) in mdp.observed() {
        for (t, c) in &row.targets {
            w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(a as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&t.to_le_bytes()).map_err(io)?;
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_binary(path: &Path) -> Result<TabularMdp, MdpError> {
    let io = |e| MdpError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| MdpError::Corrupt {
        message: "file shorter than header".into(),
    })?;
    if magic != MAGIC {
        return Err(MdpError::Corrupt {
            message: format!("bad magic {magic:?}"),
        });
    }
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64, MdpError> {
        r.read_exact(&mut u64_buf).map_err(|_| MdpError::Corrupt {
            message: "truncated header".into(),
        })?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let s_count = read_u64(&mut r)? as usize;
    let a_count = read_u64(&mut r)? as usize;
    let reward_magnitude = f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes());
    let gamma = f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes());
    let prune_min_count = read_u64(&mut r)?;
    let n_triples = read_u64(&mut r)?;

    let config = EstimateConfig {
        reward_magnitude,
        gamma,
        prune_min_count,
    };
    config.validate().map_err(|e| MdpError::Corrupt {
        message: format!("invalid stored config: {e}"),
    })?;

    let mut triples = Vec::with_capacity(n_triples as usize);
    let mut rec = [0u8; 20];
    for i in 0..n_triples {
        r.read_exact(&mut rec).map_err(|_| MdpError::Corrupt {
            message: format!("truncated at triple {i} of {n_triples}"),
        })?;
        let s = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
        let a = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")) as usize;
        let t = u32::from_le_bytes(rec[8..12].try_into().expect("4 bytes")) as usize;
        let c = u64::from_le_bytes(rec[12..20].try_into().expect("8 bytes"));
        triples.push((s, a, t, c));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(MdpError::Corrupt {
            message: "trailing bytes after declared triples".into(),
        });
    }
    TabularMdp::from_counts(s_count, a_count, config, &triples).map_err(|e| MdpError::Corrupt {
        message: format!("invalid stored triples: {e}"),
    })
}
