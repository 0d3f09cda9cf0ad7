//! Trajectory cohorts: the raw input data model.
//!
//! A cohort is a set of patient trajectories sampled at a fixed time
//! interval. Each timestep carries a feature vector plus the two
//! administered drug doses (IV fluid volume and vasopressor rate), and each
//! trajectory ends with a long-horizon outcome label. Rewards, states, and
//! actions are all derived later; this module is only about getting the data
//! in and out losslessly.
//!
//! # File formats
//!
//! **JSON Lines** (primary, `.jsonl`): line 1 is the schema header, every
//! following non-empty line is one trajectory:
//!
//! ```text
//! {"feature_names":["hr","map"],"units":["bpm","mmHg"],"dim":2,"interval_hours":4.0}
//! {"patient_id":"p1","outcome":"survived_90","steps":[{"t":0,"x":[80.0,65.0],"fluid":0.0,"vaso":0.0}]}
//! ```
//!
//! Serialization is canonical: re-serializing a loaded cohort reproduces the
//! input byte for byte.
//!
//! **Long CSV** (secondary, `.csv`): one row per (patient, timestep) with
//! columns `patient_id,outcome,t,fluid,vaso,<feature...>`. Rows of one
//! patient must be contiguous. CSV carries no units and no interval, so the
//! loader fills in empty units and a 4-hour interval.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, domain};

/// Default sampling interval assumed for CSV inputs, which cannot carry one.
pub const DEFAULT_INTERVAL_HOURS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("schema mismatch: {message}")]
    SchemaMismatch { message: String },
    #[error("patient {patient_id}: time indices not strictly increasing at step {step}")]
    NonMonotoneTime { patient_id: String, step: usize },
    #[error("cohort is empty: {context}")]
    EmptyCohort { context: String },
    #[error("too few trajectories: have {have}, need at least {need}")]
    TooFewTrajectories { have: usize, need: usize },
    #[error("invalid split fraction {value}: must satisfy 0 < f < 1")]
    InvalidSplitFraction { value: f64 },
}

fn io_err(path: &Path, source: std::io::Error) -> CohortError {
    if source.kind() == std::io::ErrorKind::NotFound {
        CohortError::MissingFile {
            path: path.to_path_buf(),
        }
    } else {
        CohortError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Cohort-level header describing every trajectory's feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSchema {
    pub feature_names: Vec<String>,
    pub units: Vec<String>,
    pub dim: usize,
    pub interval_hours: f64,
}

/// 90-day outcome attached to a whole trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "survived_90")]
    Survived90,
    #[serde(rename = "died_90")]
    Died90,
}

/// One fixed-interval observation: features plus the doses given over the
/// interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timestep {
    /// Time index within the trajectory (strictly increasing).
    pub t: u32,
    /// Feature vector; length must equal the schema's `dim`.
    #[serde(rename = "x")]
    pub features: Vec<f64>,
    /// IV fluid volume administered over the interval (>= 0).
    pub fluid: f64,
    /// Vasopressor rate over the interval (>= 0).
    pub vaso: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub patient_id: String,
    pub outcome: Outcome,
    pub steps: Vec<Timestep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub schema: CohortSchema,
    pub trajectories: Vec<Trajectory>,
}

impl CohortSchema {
    fn validate(&self) -> Result<(), CohortError> {
        if self.feature_names.len() != self.dim {
            return Err(CohortError::SchemaMismatch {
                message: format!(
                    "header declares dim {} but has {} feature names",
                    self.dim,
                    self.feature_names.len()
                ),
            });
        }
        if self.units.len() != self.dim {
            return Err(CohortError::SchemaMismatch {
                message: format!(
                    "header declares dim {} but has {} units",
                    self.dim,
                    self.units.len()
                ),
            });
        }
        if !(self.interval_hours.is_finite() && self.interval_hours > 0.0) {
            return Err(CohortError::SchemaMismatch {
                message: format!(
                    "interval_hours must be positive and finite, got {}",
                    self.interval_hours
                ),
            });
        }
        Ok(())
    }
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Total number of timesteps across all trajectories.
    pub fn timestep_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }
}

/// Fraction of trajectories with outcome `Died90`.
///
/// Mortality of an empty cohort is undefined and reported as an error rather
/// than a silent `NaN` or zero.
pub fn cohort_mortality(cohort: &Cohort) -> Result<f64, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort {
            context: "mortality is undefined for an empty cohort".into(),
        });
    }
    let died = cohort
        .trajectories
        .iter()
        .filter(|t| t.outcome == Outcome::Died90)
        .count();
    Ok(died as f64 / cohort.len() as f64)
}

/// Validate one trajectory against the schema and structural rules.
///
/// `line` is used for error reporting when loading from a file; pass 0 for
/// in-memory validation.
fn validate_trajectory(
    schema: &CohortSchema,
    traj: &Trajectory,
    line: usize,
) -> Result<(), CohortError> {
    if traj.steps.is_empty() {
        return Err(CohortError::MalformedRecord {
            line,
            message: format!("patient {}: trajectory has no steps", traj.patient_id),
        });
    }
    let mut prev_t: Option<u32> = None;
    for (i, step) in traj.steps.iter().enumerate() {
        if step.features.len() != schema.dim {
            return Err(CohortError::SchemaMismatch {
                message: format!(
                    "patient {} step {}: {} features but header declares dim {} (line {})",
                    traj.patient_id,
                    i,
                    step.features.len(),
                    schema.dim,
                    line
                ),
            });
        }
        if let Some(p) = prev_t {
            if step.t <= p {
                return Err(CohortError::NonMonotoneTime {
                    patient_id: traj.patient_id.clone(),
                    step: i,
                });
            }
        }
        prev_t = Some(step.t);
        if let Some(j) = step.features.iter().position(|v| !v.is_finite()) {
            return Err(CohortError::MalformedRecord {
                line,
                message: format!(
                    "patient {} step {}: feature {} is not finite",
                    traj.patient_id, i, j
                ),
            });
        }
        for (dose, name) in [(step.fluid, "fluid"), (step.vaso, "vaso")] {
            if !dose.is_finite() {
                return Err(CohortError::MalformedRecord {
                    line,
                    message: format!(
                        "patient {} step {}: {name} dose is not finite",
                        traj.patient_id, i
                    ),
                });
            }
            if dose < 0.0 {
                return Err(CohortError::MalformedRecord {
                    line,
                    message: format!(
                        "patient {} step {}: {name} dose is negative ({dose})",
                        traj.patient_id, i
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Validate an in-memory cohort (schema consistency, monotone time, finite
/// non-negative values, unique patient ids).
pub fn validate_cohort(cohort: &Cohort) -> Result<(), CohortError> {
    cohort.schema.validate()?;
    let mut ids = BTreeSet::new();
    for traj in &cohort.trajectories {
        if !ids.insert(traj.patient_id.as_str()) {
            return Err(CohortError::MalformedRecord {
                line: 0,
                message: format!("duplicate patient id {}", traj.patient_id),
            });
        }
        validate_trajectory(&cohort.schema, traj, 0)?;
    }
    Ok(())
}

/// Load a cohort, dispatching on the file extension (`.csv` for long CSV,
/// anything else for JSON Lines).
///
/// With `schema_check` set, every record is validated against the header
/// (feature dimension, monotone time, finite values, non-negative doses,
/// unique ids). Without it only JSON/CSV structure is checked; downstream
/// consumers still fail with typed errors on inconsistent data, so the fast
/// path is safe, just less eager.
pub fn load_cohort(path: &Path, schema_check: bool) -> Result<Cohort, CohortError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path, schema_check),
        _ => load_jsonl(path, schema_check),
    }
}

/// Load the JSON Lines format. See [`load_cohort`] for `schema_check`.
pub fn load_jsonl(path: &Path, schema_check: bool) -> Result<Cohort, CohortError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let schema: CohortSchema = match lines.next() {
        None => {
            return Err(CohortError::MalformedRecord {
                line: 1,
                message: "file is empty; expected a schema header".into(),
            })
        }
        Some((_, line)) => {
            let line = line.map_err(|e| io_err(path, e))?;
            serde_json::from_str(&line).map_err(|e| CohortError::MalformedRecord {
                line: 1,
                message: format!("bad schema header: {e}"),
            })?
        }
    };
    schema.validate()?;

    let mut trajectories = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory =
            serde_json::from_str(&line).map_err(|e| CohortError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if schema_check {
            if !ids.insert(traj.patient_id.clone()) {
                return Err(CohortError::MalformedRecord {
                    line: line_no,
                    message: format!("duplicate patient id {}", traj.patient_id),
                });
            }
            validate_trajectory(&schema, &traj, line_no)?;
        }
        trajectories.push(traj);
    }
    Ok(Cohort {
        schema,
        trajectories,
    })
}

/// Serialize to the canonical JSON Lines representation.
pub fn to_jsonl_string(cohort: &Cohort) -> String {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&cohort.schema).expect("schema serializes"));
    out.push('\n');
    for traj in &cohort.trajectories {
        out.push_str(&serde_json::to_string(traj).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl_string(cohort).as_bytes())
        .map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

const CSV_FIXED_COLUMNS: [&str; 5] = ["patient_id", "outcome", "t", "fluid", "vaso"];

fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Survived90 => "survived_90",
        Outcome::Died90 => "died_90",
    }
}

fn parse_outcome(s: &str, line: usize) -> Result<Outcome, CohortError> {
    match s {
        "survived_90" => Ok(Outcome::Survived90),
        "died_90" => Ok(Outcome::Died90),
        other => Err(CohortError::MalformedRecord {
            line,
            message: format!("unknown outcome {other:?}; expected survived_90 or died_90"),
        }),
    }
}

/// Load the long CSV format. Feature names come from the header; units are
/// unknown in CSV and default to empty strings, the interval to
/// [`DEFAULT_INTERVAL_HOURS`].
pub fn load_csv(path: &Path, schema_check: bool) -> Result<Cohort, CohortError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| CohortError::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < CSV_FIXED_COLUMNS.len() {
        return Err(CohortError::SchemaMismatch {
            message: format!(
                "csv header has {} columns; expected at least {:?}",
                headers.len(),
                CSV_FIXED_COLUMNS
            ),
        });
    }
    for (i, want) in CSV_FIXED_COLUMNS.iter().enumerate() {
        if &headers[i] != *want {
            return Err(CohortError::SchemaMismatch {
                message: format!("csv column {} is {:?}, expected {:?}", i, &headers[i], want),
            });
        }
    }
    let feature_names: Vec<String> = headers
        .iter()
        .skip(CSV_FIXED_COLUMNS.len())
        .map(String::from)
        .collect();
    let dim = feature_names.len();
    let schema = CohortSchema {
        units: vec![String::new(); dim],
        feature_names,
        dim,
        interval_hours: DEFAULT_INTERVAL_HOURS,
    };

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| CohortError::MalformedRecord {
            line,
            message: e.to_string(),
        })?;
        if record.len() != CSV_FIXED_COLUMNS.len() + dim {
            return Err(CohortError::SchemaMismatch {
                message: format!(
                    "line {}: {} fields but header has {}",
                    line,
                    record.len(),
                    CSV_FIXED_COLUMNS.len() + dim
                ),
            });
        }
        let parse_f64 = |i: usize, what: &str| -> Result<f64, CohortError> {
            record[i]
                .parse::<f64>()
                .map_err(|_| CohortError::MalformedRecord {
                    line,
                    message: format!("{what} {:?} is not a number", &record[i]),
                })
        };
        let patient_id = record[0].to_string();
        let outcome = parse_outcome(&record[1], line)?;
        let t: u32 = record[2]
            .parse()
            .map_err(|_| CohortError::MalformedRecord {
                line,
                message: format!("t {:?} is not a non-negative integer", &record[2]),
            })?;
        let fluid = parse_f64(3, "fluid")?;
        let vaso = parse_f64(4, "vaso")?;
        let mut features = Vec::with_capacity(dim);
        for i in 0..dim {
            features.push(parse_f64(CSV_FIXED_COLUMNS.len() + i, "feature")?);
        }
        let step = Timestep {
            t,
            features,
            fluid,
            vaso,
        };

        match trajectories.last_mut() {
            Some(last) if last.patient_id == patient_id => {
                if last.outcome != outcome {
                    return Err(CohortError::MalformedRecord {
                        line,
                        message: format!("patient {patient_id}: inconsistent outcome across rows"),
                    });
                }
                last.steps.push(step);
            }
            _ => {
                if !seen.insert(patient_id.clone()) {
                    return Err(CohortError::MalformedRecord {
                        line,
                        message: format!("patient {patient_id}: rows are not contiguous"),
                    });
                }
                trajectories.push(Trajectory {
                    patient_id,
                    outcome,
                    steps: vec![step],
                });
            }
        }
    }
    let cohort = Cohort {
        schema,
        trajectories,
    };
    if schema_check {
        validate_cohort(&cohort)?;
    }
    Ok(cohort)
}

pub fn save_csv(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<&str> = CSV_FIXED_COLUMNS.to_vec();
    header.extend(cohort.schema.feature_names.iter().map(String::as_str));
    w.write_record(&header)
        .map_err(|e| CohortError::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?;
    for traj in &cohort.trajectories {
        for step in &traj.steps {
            let mut row: Vec<String> = vec![
                traj.patient_id.clone(),
                outcome_label(traj.outcome).to_string(),
                step.t.to_string(),
                format_f64(step.fluid),
                format_f64(step.vaso),
            ];
            row.extend(step.features.iter().map(|v| format_f64(*v)));
            w.write_record(&row)
                .map_err(|e| CohortError::MalformedRecord {
                    line: 0,
                    message: e.to_string(),
                })?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Shortest round-trippable decimal form, matching JSON number formatting.
pub(crate) fn format_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // serde_json's canonical float formatting, reused for CSV so the two
    // formats agree on decimal representations.
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

/// Deterministically partition a cohort by patient into train and test.
///
/// The train side receives exactly `round(n * train_fraction)` trajectories,
/// chosen by a seeded shuffle; each side preserves the original cohort
/// order. The same `(cohort, fraction, seed)` always yields the same
/// partition.
pub fn split_cohort(
    cohort: &Cohort,
    train_fraction: f64,
    seed: u64,
) -> Result<(Cohort, Cohort), CohortError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CohortError::InvalidSplitFraction {
            value: train_fraction,
        });
    }
    let n = cohort.len();
    if n < 2 {
        return Err(CohortError::TooFewTrajectories { have: n, need: 2 });
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = seeds::stream_rng(seed, domain::SPLIT_SHUFFLE, 0);
    order.shuffle(&mut rng);

    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize]| Cohort {
        schema: cohort.schema.clone(),
        trajectories: idx
            .iter()
            .map(|&i| cohort.trajectories[i].clone())
            .collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}
