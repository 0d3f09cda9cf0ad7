//! The single JSON configuration document driving every stage.
//!
//! Unknown keys are rejected everywhere (typo safety), `--set key=value`
//! overrides individual entries, and the canonical serialized form — minus
//! `output_dir`, which is a location rather than content — is hashed into the
//! run directory name, so distinct configurations can never collide in one
//! run directory.

use std::fs;
use std::path::{Path, PathBuf};

use dosewise_core::discretize::{DrugAxis, ACTION_COUNT, DOSE_BINS};
use dosewise_core::insight::GapMode;
use dosewise_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cohort file to ingest. Mutually exclusive with `synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    /// Synthetic-world generator; when present the pipeline starts from the
    /// generated cohort instead of an external file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    /// Parent directory for run directories. Falls back to the DOSEWISE_OUT
    /// environment variable, then to `runs/`. Not part of the run identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub discretizer: DiscretizerSection,
    #[serde(default)]
    pub mdp: MdpSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub ope: OpeSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub cohort: PathBuf,
    #[serde(default)]
    pub format: InputFormat,
    #[serde(default = "default_true")]
    pub schema_check: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// Decide by file extension: `.csv` is CSV, everything else is JSONL.
    #[default]
    Auto,
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizerSection {
    pub s_count: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Explicit positive-dose edges; fitted from training data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fluid_edges: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vaso_edges: Option<[f64; 4]>,
}

impl Default for DiscretizerSection {
    fn default() -> Self {
        DiscretizerSection {
            s_count: 750,
            seed: 0,
            restarts: 32,
            max_iter: 300,
            fluid_edges: None,
            vaso_edges: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSection {
    pub reward_magnitude: f64,
    pub gamma: f64,
    pub prune_min_count: u64,
}

impl Default for MdpSection {
    fn default() -> Self {
        MdpSection {
            reward_magnitude: 100.0,
            gamma: 0.99,
            prune_min_count: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Action pinned to states with no allowed pair; `null` makes such
    /// states a hard error. Defaults to action 1 (no drugs).
    pub fallback_action: Option<usize>,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tol: 1e-8,
            max_iter: 100_000,
            fallback_action: Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeSection {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Which dataset the behavior policy is estimated from. `eval` (the
    /// default) guarantees every visited pair has positive behavior
    /// probability; `train` surfaces coverage gaps as hard errors.
    pub behavior_from: BehaviorFrom,
}

impl Default for OpeSection {
    fn default() -> Self {
        OpeSection {
            resamples: 2000,
            confidence: 0.90,
            seed: 0,
            behavior_from: BehaviorFrom::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorFrom {
    Eval,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub batches: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub initial_dist: InitialDist,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            batches: 1000,
            batch_size: 2500,
            max_steps: 200,
            seed: 0,
            initial_dist: InitialDist::Empirical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDist {
    /// Start-state frequencies of the training dataset.
    Empirical,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Agreement threshold: states whose agreement fraction strictly exceeds
    /// this are counted "above".
    pub threshold: f64,
    /// Explicit interior edges for the dose-gap curve; deciles when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_bins: Option<Vec<f64>>,
    pub gap_mode: GapMode,
    /// Drug axis for the permutation-importance target label.
    pub importance_axis: DrugAxis,
    pub classifier: ClassifierSection,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            threshold: 0.05,
            gap_bins: None,
            gap_mode: GapMode::AverageGap,
            importance_axis: DrugAxis::Fluid,
            classifier: ClassifierSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub trees: usize,
    pub max_depth: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            trees: 50,
            max_depth: 6,
            permutations: 10,
            seed: 0,
        }
    }
}

/// Synthetic-world parameters plus the cohort draw size and salt.
/// Mirrors the generator's own configuration field for field so unknown keys
/// are still rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub s_count: usize,
    pub a_count: usize,
    pub branching: usize,
    pub absorb_prob: f64,
    pub death_share: f64,
    pub behavior_support: usize,
    pub behavior_alpha: f64,
    pub behavior_floor: f64,
    pub feature_dim: usize,
    pub emission_noise: f64,
    pub emission_separation: f64,
    pub fluid_grid: [f64; DOSE_BINS],
    pub vaso_grid: [f64; DOSE_BINS],
    pub seed: u64,
    /// Number of trajectories to draw.
    pub n: usize,
    /// Stream salt separating independent cohorts from the same world.
    pub salt: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        let world = SynthConfig::default();
        SynthSection {
            s_count: world.s_count,
            a_count: world.a_count,
            branching: world.branching,
            absorb_prob: world.absorb_prob,
            death_share: world.death_share,
            behavior_support: world.behavior_support,
            behavior_alpha: world.behavior_alpha,
            behavior_floor: world.behavior_floor,
            feature_dim: world.feature_dim,
            emission_noise: world.emission_noise,
            emission_separation: world.emission_separation,
            fluid_grid: world.fluid_grid,
            vaso_grid: world.vaso_grid,
            seed: world.seed,
            n: 5000,
            salt: 1,
        }
    }
}

impl SynthSection {
    pub fn to_core(&self) -> SynthConfig {
        SynthConfig {
            s_count: self.s_count,
            a_count: self.a_count,
            branching: self.branching,
            absorb_prob: self.absorb_prob,
            death_share: self.death_share,
            behavior_support: self.behavior_support,
            behavior_alpha: self.behavior_alpha,
            behavior_floor: self.behavior_floor,
            feature_dim: self.feature_dim,
            emission_noise: self.emission_noise,
            emission_separation: self.emission_separation,
            fluid_grid: self.fluid_grid,
            vaso_grid: self.vaso_grid,
            seed: self.seed,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.input.is_some() && self.synth.is_some() {
            return fail("provide either `input` or `synth`, not both".into());
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return fail(format!(
                "split.train_fraction {} outside (0, 1)",
                self.split.train_fraction
            ));
        }
        if self.discretizer.s_count == 0 {
            return fail("discretizer.s_count must be positive".into());
        }
        if self.discretizer.restarts == 0 || self.discretizer.max_iter == 0 {
            return fail("discretizer.restarts and max_iter must be positive".into());
        }
        if !(self.mdp.gamma > 0.0 && self.mdp.gamma <= 1.0) {
            return fail(format!("mdp.gamma {} outside (0, 1]", self.mdp.gamma));
        }
        if !(self.mdp.reward_magnitude > 0.0 && self.mdp.reward_magnitude.is_finite()) {
            return fail(format!(
                "mdp.reward_magnitude {} must be positive and finite",
                self.mdp.reward_magnitude
            ));
        }
        if !(self.solver.tol > 0.0 && self.solver.tol.is_finite()) || self.solver.max_iter == 0 {
            return fail("solver.tol must be positive and solver.max_iter at least 1".into());
        }
        if let Some(a) = self.solver.fallback_action {
            if !(1..=ACTION_COUNT).contains(&a) {
                return fail(format!(
                    "solver.fallback_action {a} outside 1..={ACTION_COUNT}"
                ));
            }
        }
        if self.ope.resamples == 0 {
            return fail("ope.resamples must be positive".into());
        }
        if !(self.ope.confidence > 0.0 && self.ope.confidence < 1.0) {
            return fail(format!(
                "ope.confidence {} outside (0, 1)",
                self.ope.confidence
            ));
        }
        if self.rollout.batches < 2 {
            return fail(
                "rollout.batches must be at least 2 (the batch spread needs a sample variance)"
                    .into(),
            );
        }
        if self.rollout.batch_size == 0 || self.rollout.max_steps == 0 {
            return fail("rollout.batch_size and max_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.analysis.threshold) {
            return fail(format!(
                "analysis.threshold {} outside [0, 1)",
                self.analysis.threshold
            ));
        }
        if let Some(edges) = &self.analysis.gap_bins {
            if edges.iter().any(|e| !e.is_finite()) {
                return fail("analysis.gap_bins entries must be finite".into());
            }
        }
        let c = &self.analysis.classifier;
        if c.trees == 0 || c.max_depth == 0 || c.permutations == 0 {
            return fail(
                "analysis.classifier trees, max_depth, and permutations must be positive".into(),
            );
        }
        if let Some(s) = &self.synth {
            s.to_core()
                .validate()
                .map_err(|e| CliError::Config(format!("synth: {e}")))?;
            if s.n < 2 {
                return fail(format!(
                    "synth.n {} must be at least 2 to allow a split",
                    s.n
                ));
            }
        }
        Ok(())
    }
}

/// Read, override, deserialize (rejecting unknown keys), and range-check.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("config {} is not valid JSON: {e}", path.display()))
    })?;
    if !value.is_object() {
        return Err(CliError::Config(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply one `--set key.path=value` override to the raw JSON document.
/// The value is parsed as JSON when possible, otherwise taken as a string,
/// so `--set ope.resamples=500` and `--set analysis.importance_axis=vaso`
/// both do the obvious thing.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' must look like KEY=VALUE")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key '{key}' has an empty path segment"
        )));
    }
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override '{key}': '{part}' is not an object in the config"
            ))
        })?;
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let leaf = parts[parts.len() - 1];
    let parsed =
        serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let obj = cursor.as_object_mut().ok_or_else(|| {
        CliError::Config(format!(
            "override '{key}': parent of '{leaf}' is not an object"
        ))
    })?;
    obj.insert(leaf.to_string(), parsed);
    Ok(())
}

/// The canonical content of a run: the full effective config except its
/// output location.
pub fn identity_value(cfg: &PipelineConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut()
        .expect("config is an object")
        .remove("output_dir");
    v
}

/// First 16 hex characters of the SHA-256 of the canonical config.
pub fn run_id(identity: &Value) -> String {
    let canonical = serde_json::to_string(identity).expect("identity serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str, overrides: &[&str]) -> Result<PipelineConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, json).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        load_config(&path, &o)
    }

    #[test]
    fn empty_object_yields_all_defaults() {
        let cfg = parse("{}", &[]).unwrap();
        assert_eq!(cfg.discretizer.s_count, 750);
        assert_eq!(cfg.mdp.gamma, 0.99);
        assert_eq!(cfg.solver.fallback_action, Some(1));
        assert_eq!(cfg.ope.behavior_from, BehaviorFrom::Eval);
        assert_eq!(cfg.rollout.batches, 1000);
        assert_eq!(cfg.analysis.gap_mode, GapMode::AverageGap);
        assert!(cfg.input.is_none() && cfg.synth.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top = parse(r#"{"discretiser": {}}"#, &[]).unwrap_err();
        assert!(matches!(top, CliError::Config(_)), "{top}");
        assert!(top.to_string().contains("discretiser"));
        let nested = parse(r#"{"ope": {"resample": 10}}"#, &[]).unwrap_err();
        assert!(nested.to_string().contains("resample"));
    }

    #[test]
    fn overrides_reach_nested_keys_and_parse_types() {
        let cfg = parse(
            "{}",
            &[
                "ope.resamples=500",
                "analysis.importance_axis=vaso",
                "solver.fallback_action=null",
                "synth.n=250",
                "split.train_fraction=0.5",
            ],
        )
        .unwrap();
        assert_eq!(cfg.ope.resamples, 500);
        assert_eq!(cfg.analysis.importance_axis, DrugAxis::Vaso);
        assert_eq!(cfg.solver.fallback_action, None);
        assert_eq!(cfg.synth.as_ref().unwrap().n, 250);
        assert_eq!(
            cfg.synth.as_ref().unwrap().s_count,
            SynthConfig::default().s_count
        );
        assert_eq!(cfg.split.train_fraction, 0.5);
    }

    #[test]
    fn override_with_bogus_key_is_a_config_error() {
        let err = parse("{}", &["ope.resample=10"]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = parse("{}", &["no-equals-sign"]).unwrap_err();
        assert!(err.to_string().contains("KEY=VALUE"));
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        for (json, needle) in [
            (r#"{"split": {"train_fraction": 1.5}}"#, "train_fraction"),
            (r#"{"mdp": {"gamma": 0.0}}"#, "gamma"),
            (r#"{"solver": {"fallback_action": 26}}"#, "fallback_action"),
            (r#"{"rollout": {"batches": 1}}"#, "batches"),
            (r#"{"analysis": {"threshold": 1.0}}"#, "threshold"),
            (r#"{"ope": {"confidence": 1.0}}"#, "confidence"),
        ] {
            let err = parse(json, &[]).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{json}");
            assert!(err.to_string().contains(needle), "{json} -> {err}");
        }
    }

    #[test]
    fn input_and_synth_together_are_rejected() {
        let err = parse(r#"{"input": {"cohort": "x.jsonl"}, "synth": {}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("not both"));
    }

    #[test]
    fn run_id_ignores_key_order_and_output_dir() {
        let a = parse(r#"{"ope": {"resamples": 7}, "mdp": {"gamma": 0.9}}"#, &[]).unwrap();
        let b = parse(r#"{"mdp": {"gamma": 0.9}, "ope": {"resamples": 7}}"#, &[]).unwrap();
        let c = parse(
            r#"{"mdp": {"gamma": 0.9}, "ope": {"resamples": 7}, "output_dir": "elsewhere"}"#,
            &[],
        )
        .unwrap();
        let id = |cfg: &PipelineConfig| run_id(&identity_value(cfg));
        assert_eq!(id(&a), id(&b));
        assert_eq!(id(&a), id(&c));
        assert_eq!(id(&a).len(), 16);

        let d = parse(r#"{"mdp": {"gamma": 0.95}, "ope": {"resamples": 7}}"#, &[]).unwrap();
        assert_ne!(id(&a), id(&d));
    }
}
