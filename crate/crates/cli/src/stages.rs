//! The pipeline stages. Each stage verifies its inputs, skips itself when
//! already up to date, computes, and records a manifest.
//!
//! Artifact layout under the run directory:
//!
//! ```text
//! run-<16 hex of config hash>/
//!   config.json                       effective config snapshot
//!   synth/cohort.jsonl                generated cohort (synth configs only)
//!   ingest/train.jsonl  eval.jsonl    validated split
//!   discretize/model.json train.json eval.json
//!   estimate/mdp.bin initial_distribution.json
//!   solve/policy.json values.json
//!   evaluate/ope_optimal.json ope_zero_drug.json
//!   simulate/rollout_behavior.json rollout_optimal.json
//!   analyze/agreement.json dose_gap_{fluid,vaso}.{json,csv}
//!           importance.json importance_comparison.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dosewise_core::cohort::{load_csv, load_jsonl, split_cohort, to_jsonl_string, Cohort};
use dosewise_core::discretize::{
    discretize_cohort, fit_discretizer, DiscreteDataset, DiscretizationModel, DiscretizerConfig,
    DrugAxis, FitWarning,
};
use dosewise_core::insight::{
    ai_drug_labels, behavior_drug_labels, compare_importances, comparison_csv, dose_gap,
    feature_matrix, gap_curve_csv, permutation_importance, BinSpec, ImportanceComparison,
    ImportanceConfig, ImportanceReport, InsightError,
};
use dosewise_core::mdp::{estimate_mdp, load_binary, save_binary, EstimateConfig, TabularMdp};
use dosewise_core::ope::{wis_evaluate, BootstrapConfig, OpeError, OpeReport};
use dosewise_core::rollout::{validate_model, RolloutConfig, RolloutError, RolloutStats};
use dosewise_core::solver::{
    behavior_policy, solve_optimal, zero_drug_policy, Policy, SolveConfig, SolveInfo, ValueFunction,
};
use dosewise_core::synth::{make_ground_truth, sample_cohort};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{
    load_manifest, outputs_clean, read_json, sha256_file, verify_artifact, write_bytes, write_json,
    Manifest,
};
use crate::config::{
    identity_value, run_id, BehaviorFrom, InitialDist, InputFormat, PipelineConfig,
};
use crate::error::{runtime, CliError};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub identity: Value,
    pub run_id: String,
    pub run_dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let identity = identity_value(&cfg);
        let id = run_id(&identity);
        let parent = cfg
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("DOSEWISE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let run_dir = parent.join(format!("run-{id}"));
        Ctx {
            cfg,
            identity,
            run_id: id,
            run_dir,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// Create the run directory and drop the canonical config snapshot in it.
    fn ensure_run_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.run_dir).map_err(|e| {
            CliError::Runtime(format!("cannot create {}: {e}", self.run_dir.display()))
        })?;
        write_json(&self.run_dir.join("config.json"), &self.identity)
    }
}

/// What a stage computed: run-relative files it wrote, warnings for the
/// manifest, and a one-line human summary.
struct StageOutput {
    files: Vec<String>,
    warnings: Vec<String>,
    summary: String,
}

/// Shared stage driver: verify inputs (exit 2/3 on missing/tampered), skip
/// when up to date, otherwise compute, hash outputs, and write the manifest.
fn run_stage(
    ctx: &Ctx,
    name: &'static str,
    seed: u64,
    internal_inputs: &[String],
    external_inputs: &[PathBuf],
    compute: impl FnOnce() -> Result<StageOutput, CliError>,
) -> Result<bool, CliError> {
    ctx.ensure_run_dir()?;

    let mut inputs = BTreeMap::new();
    for rel in internal_inputs {
        let hash = verify_artifact(&ctx.run_dir, rel)?;
        inputs.insert(rel.clone(), hash);
    }
    for path in external_inputs {
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "input file {} does not exist",
                path.display()
            )));
        }
        inputs.insert(path.display().to_string(), sha256_file(path)?);
    }

    if let Some(manifest) = load_manifest(&ctx.run_dir, name)? {
        if manifest.config == ctx.identity
            && manifest.inputs == inputs
            && outputs_clean(&ctx.run_dir, &manifest)?
        {
            println!("{name}: up to date");
            return Ok(false);
        }
    }

    let out = compute()?;
    let mut outputs = BTreeMap::new();
    for rel in &out.files {
        outputs.insert(rel.clone(), sha256_file(&ctx.path(rel))?);
    }
    let manifest = Manifest {
        stage: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: ctx.run_id.clone(),
        seed,
        config: ctx.identity.clone(),
        inputs,
        outputs,
        warnings: out.warnings,
    };
    write_json(&ctx.path(name).join("manifest.json"), &manifest)?;
    println!("{name}: {}", out.summary);
    Ok(true)
}

fn load_cohort_file(
    path: &Path,
    format: InputFormat,
    schema_check: bool,
) -> Result<Cohort, CliError> {
    let is_csv = match format {
        InputFormat::Csv => true,
        InputFormat::Jsonl => false,
        InputFormat::Auto => path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv")),
    };
    let loaded = if is_csv {
        load_csv(path, schema_check)
    } else {
        load_jsonl(path, schema_check)
    };
    loaded.map_err(|e| runtime(&format!("failed to load cohort {}", path.display()), e))
}

fn estimate_config(cfg: &PipelineConfig) -> EstimateConfig {
    EstimateConfig {
        reward_magnitude: cfg.mdp.reward_magnitude,
        gamma: cfg.mdp.gamma,
        prune_min_count: cfg.mdp.prune_min_count,
    }
}

// ---------------------------------------------------------------------------
// Artifact schemas owned by the CLI
// ---------------------------------------------------------------------------

/// Optimal value function plus solver diagnostics (`solve/values.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveValues {
    pub values: ValueFunction,
    pub info: SolveInfo,
}

/// One policy's off-policy evaluation (`evaluate/ope_*.json`). A policy whose
/// importance weights are all zero is recorded as a failed evaluation rather
/// than aborting the run: that outcome is a finding, not a crash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpeArtifact {
    pub policy: String,
    pub behavior_from: BehaviorFrom,
    pub gamma: f64,
    pub reward_magnitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<OpeReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// One policy's model-based rollout validation (`simulate/rollout_*.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutArtifact {
    pub policy: String,
    pub initial_dist: InitialDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<RolloutStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Permutation-importance pair plus their discrepancy ranking
/// (`analyze/importance.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceArtifact {
    pub axis: DrugAxis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<ImportanceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai: Option<ImportanceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ImportanceComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn stage_synth(ctx: &Ctx) -> Result<bool, CliError> {
    let section = ctx
        .cfg
        .synth
        .clone()
        .ok_or_else(|| CliError::Config("the synth stage requires a `synth` section".into()))?;
    run_stage(ctx, "synth", section.seed, &[], &[], || {
        let world = make_ground_truth(&section.to_core()).map_err(|e| runtime("synth world", e))?;
        let (cohort, _) = sample_cohort(&world, section.n, section.salt)
            .map_err(|e| runtime("synth cohort", e))?;
        write_bytes(
            &ctx.path("synth/cohort.jsonl"),
            to_jsonl_string(&cohort).as_bytes(),
        )?;
        Ok(StageOutput {
            files: vec!["synth/cohort.jsonl".into()],
            warnings: vec![],
            summary: format!(
                "generated {} trajectories ({} timesteps)",
                cohort.len(),
                cohort.timestep_count()
            ),
        })
    })
}

pub fn stage_ingest(ctx: &Ctx) -> Result<bool, CliError> {
    enum Source {
        External(PathBuf, InputFormat, bool),
        Synthetic,
    }
    let source = match (&ctx.cfg.input, &ctx.cfg.synth) {
        (Some(input), None) => {
            Source::External(input.cohort.clone(), input.format, input.schema_check)
        }
        (None, Some(_)) => Source::Synthetic,
        (None, None) => {
            return Err(CliError::Config(
                "ingest needs either an `input` or a `synth` section".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("rejected by config validation"),
    };
    let (internal, external): (Vec<String>, Vec<PathBuf>) = match &source {
        Source::External(path, _, _) => (vec![], vec![path.clone()]),
        Source::Synthetic => (vec!["synth/cohort.jsonl".into()], vec![]),
    };
    run_stage(
        ctx,
        "ingest",
        ctx.cfg.split.seed,
        &internal,
        &external,
        || {
            let cohort = match &source {
                Source::External(path, format, schema_check) => {
                    load_cohort_file(path, *format, *schema_check)?
                }
                Source::Synthetic => {
                    load_cohort_file(&ctx.path("synth/cohort.jsonl"), InputFormat::Jsonl, true)?
                }
            };
            let (train, eval) =
                split_cohort(&cohort, ctx.cfg.split.train_fraction, ctx.cfg.split.seed)
                    .map_err(|e| runtime("split", e))?;
            write_bytes(
                &ctx.path("ingest/train.jsonl"),
                to_jsonl_string(&train).as_bytes(),
            )?;
            write_bytes(
                &ctx.path("ingest/eval.jsonl"),
                to_jsonl_string(&eval).as_bytes(),
            )?;
            Ok(StageOutput {
                files: vec!["ingest/train.jsonl".into(), "ingest/eval.jsonl".into()],
                warnings: vec![],
                summary: format!(
                    "split {} trajectories into {} train / {} eval",
                    cohort.len(),
                    train.len(),
                    eval.len()
                ),
            })
        },
    )
}

pub fn stage_discretize(ctx: &Ctx) -> Result<bool, CliError> {
    let internal = vec![
        "ingest/train.jsonl".to_string(),
        "ingest/eval.jsonl".to_string(),
    ];
    run_stage(
        ctx,
        "discretize",
        ctx.cfg.discretizer.seed,
        &internal,
        &[],
        || {
            let train =
                load_cohort_file(&ctx.path("ingest/train.jsonl"), InputFormat::Jsonl, true)?;
            let eval = load_cohort_file(&ctx.path("ingest/eval.jsonl"), InputFormat::Jsonl, true)?;
            let d = &ctx.cfg.discretizer;
            let dcfg = DiscretizerConfig {
                s_count: d.s_count,
                seed: d.seed,
                restarts: d.restarts,
                max_iter: d.max_iter,
                fluid_edges: d.fluid_edges,
                vaso_edges: d.vaso_edges,
            };
            let (model, fit_warnings) =
                fit_discretizer(&train, &dcfg).map_err(|e| runtime("discretizer fit", e))?;
            let train_d =
                discretize_cohort(&model, &train).map_err(|e| runtime("discretize train", e))?;
            let eval_d =
                discretize_cohort(&model, &eval).map_err(|e| runtime("discretize eval", e))?;
            write_json(&ctx.path("discretize/model.json"), &model)?;
            write_json(&ctx.path("discretize/train.json"), &train_d)?;
            write_json(&ctx.path("discretize/eval.json"), &eval_d)?;
            let warnings = fit_warnings
                .iter()
                .map(|w| match w {
                    FitWarning::DegenerateFeature { index, name } => {
                        format!(
                            "feature {index} ({name}) is constant in training; scale floored to 1"
                        )
                    }
                    FitWarning::KMeansNotConverged { iterations } => {
                        format!("k-means hit the iteration cap ({iterations} sweeps)")
                    }
                })
                .collect();
            Ok(StageOutput {
                files: vec![
                    "discretize/model.json".into(),
                    "discretize/train.json".into(),
                    "discretize/eval.json".into(),
                ],
                warnings,
                summary: format!(
                    "fit {} states over {} training timesteps (objective {:.3}, converged={})",
                    model.s_count,
                    train_d.timestep_count(),
                    model.fit_stats.objective,
                    model.fit_stats.converged
                ),
            })
        },
    )
}

pub fn stage_estimate(ctx: &Ctx) -> Result<bool, CliError> {
    let internal = vec!["discretize/train.json".to_string()];
    run_stage(ctx, "estimate", 0, &internal, &[], || {
        let train_d: DiscreteDataset = read_json(&ctx.path("discretize/train.json"))?;
        let (mdp, orphans) = estimate_mdp(&train_d, estimate_config(&ctx.cfg))
            .map_err(|e| runtime("estimate", e))?;
        let mdp_path = ctx.path("estimate/mdp.bin");
        crate::artifact::ensure_parent(&mdp_path)?;
        save_binary(&mdp, &mdp_path).map_err(|e| runtime("write mdp.bin", e))?;
        let initial = train_d
            .initial_state_distribution()
            .map_err(|e| runtime("initial distribution", e))?;
        write_json(&ctx.path("estimate/initial_distribution.json"), &initial)?;
        let mut warnings = Vec::new();
        if !orphans.is_empty() {
            warnings.push(format!(
                "{} orphan states (seen only as transition targets): {orphans:?}",
                orphans.len()
            ));
        }
        let observed = mdp.observed().count();
        Ok(StageOutput {
            files: vec![
                "estimate/mdp.bin".into(),
                "estimate/initial_distribution.json".into(),
            ],
            warnings,
            summary: format!(
                "tallied {} transitions into {} observed (state, action) pairs",
                mdp.total_transitions(),
                observed
            ),
        })
    })
}

pub fn stage_solve(ctx: &Ctx) -> Result<bool, CliError> {
    let internal = vec!["estimate/mdp.bin".to_string()];
    run_stage(ctx, "solve", 0, &internal, &[], || {
        let mdp =
            load_binary(&ctx.path("estimate/mdp.bin")).map_err(|e| runtime("load mdp.bin", e))?;
        let s = &ctx.cfg.solver;
        let scfg = SolveConfig {
            tol: s.tol,
            max_iter: s.max_iter,
            fallback_action: s.fallback_action,
        };
        let solution = solve_optimal(&mdp, &scfg).map_err(|e| runtime("value iteration", e))?;
        write_json(&ctx.path("solve/policy.json"), &solution.policy)?;
        write_json(
            &ctx.path("solve/values.json"),
            &SolveValues {
                values: solution.values.clone(),
                info: solution.info.clone(),
            },
        )?;
        let mut warnings = Vec::new();
        if !solution.info.converged {
            warnings.push(format!(
                "value iteration stopped at max_iter={} before reaching tol={}",
                s.max_iter, s.tol
            ));
        }
        Ok(StageOutput {
            files: vec!["solve/policy.json".into(), "solve/values.json".into()],
            warnings,
            summary: format!(
                "value iteration finished in {} sweeps (converged={})",
                solution.info.iterations, solution.info.converged
            ),
        })
    })
}

pub fn stage_evaluate(ctx: &Ctx) -> Result<bool, CliError> {
    let mut internal = vec![
        "discretize/eval.json".to_string(),
        "solve/policy.json".to_string(),
    ];
    if ctx.cfg.ope.behavior_from == BehaviorFrom::Train {
        internal.push("discretize/train.json".to_string());
    }
    run_stage(ctx, "evaluate", ctx.cfg.ope.seed, &internal, &[], || {
        let eval_d: DiscreteDataset = read_json(&ctx.path("discretize/eval.json"))?;
        let optimal: Policy = read_json(&ctx.path("solve/policy.json"))?;
        let behavior_src: DiscreteDataset = match ctx.cfg.ope.behavior_from {
            BehaviorFrom::Eval => eval_d.clone(),
            BehaviorFrom::Train => read_json(&ctx.path("discretize/train.json"))?,
        };
        let (bmdp, _) = estimate_mdp(&behavior_src, estimate_config(&ctx.cfg))
            .map_err(|e| runtime("behavior estimation", e))?;
        let (behavior, _) = behavior_policy(&bmdp);
        let boot = BootstrapConfig {
            resamples: ctx.cfg.ope.resamples,
            confidence: ctx.cfg.ope.confidence,
            seed: ctx.cfg.ope.seed,
        };
        let gamma = ctx.cfg.mdp.gamma;
        let reward = ctx.cfg.mdp.reward_magnitude;

        let mut warnings = Vec::new();
        let mut summaries = Vec::new();
        let zero = zero_drug_policy(eval_d.s_count);
        for (name, target) in [("optimal", &optimal), ("zero_drug", &zero)] {
            let artifact =
                match wis_evaluate(&eval_d, &behavior, target, gamma, reward, Some(&boot)) {
                    Ok(report) => {
                        let lb = report.bootstrap.as_ref().map(|b| b.lower);
                        summaries.push(format!(
                            "{name} {:.3}{}",
                            report.point_estimate,
                            lb.map(|l| format!(" (lower bound {l:.3})"))
                                .unwrap_or_default()
                        ));
                        OpeArtifact {
                            policy: name.to_string(),
                            behavior_from: ctx.cfg.ope.behavior_from,
                            gamma,
                            reward_magnitude: reward,
                            report: Some(report),
                            failure: None,
                        }
                    }
                    Err(e @ (OpeError::NoOverlap | OpeError::AllResamplesDegenerate)) => {
                        warnings.push(format!("{name}: {e}"));
                        summaries.push(format!("{name} not evaluable ({e})"));
                        OpeArtifact {
                            policy: name.to_string(),
                            behavior_from: ctx.cfg.ope.behavior_from,
                            gamma,
                            reward_magnitude: reward,
                            report: None,
                            failure: Some(e.to_string()),
                        }
                    }
                    Err(e) => return Err(runtime(&format!("WIS for {name}"), e)),
                };
            write_json(&ctx.path(&format!("evaluate/ope_{name}.json")), &artifact)?;
        }
        Ok(StageOutput {
            files: vec![
                "evaluate/ope_optimal.json".into(),
                "evaluate/ope_zero_drug.json".into(),
            ],
            warnings,
            summary: summaries.join(", "),
        })
    })
}

pub fn stage_simulate(ctx: &Ctx) -> Result<bool, CliError> {
    let internal = vec![
        "estimate/mdp.bin".to_string(),
        "estimate/initial_distribution.json".to_string(),
        "solve/policy.json".to_string(),
    ];
    run_stage(
        ctx,
        "simulate",
        ctx.cfg.rollout.seed,
        &internal,
        &[],
        || {
            let mdp: TabularMdp = load_binary(&ctx.path("estimate/mdp.bin"))
                .map_err(|e| runtime("load mdp.bin", e))?;
            let optimal: Policy = read_json(&ctx.path("solve/policy.json"))?;
            let initial: Vec<f64> = match ctx.cfg.rollout.initial_dist {
                InitialDist::Empirical => {
                    read_json(&ctx.path("estimate/initial_distribution.json"))?
                }
                InitialDist::Uniform => vec![1.0 / mdp.s_count() as f64; mdp.s_count()],
            };
            let r = &ctx.cfg.rollout;
            let rcfg = RolloutConfig {
                batches: r.batches,
                batch_size: r.batch_size,
                max_steps: r.max_steps,
                seed: r.seed,
            };
            let (behavior, _) = behavior_policy(&mdp);

            let mut warnings = Vec::new();
            let mut summaries = Vec::new();
            for (name, policy) in [("behavior", &behavior), ("optimal", &optimal)] {
                let artifact = match validate_model(&mdp, policy, &initial, &rcfg) {
                    Ok(stats) => {
                        summaries.push(format!(
                            "{name} mortality {:.4} (sd {:.4}), length {:.2}",
                            stats.mortality_mean, stats.mortality_sd, stats.length_mean
                        ));
                        RolloutArtifact {
                            policy: name.to_string(),
                            initial_dist: r.initial_dist,
                            stats: Some(stats),
                            failure: None,
                        }
                    }
                    Err(
                        e @ (RolloutError::UnobservedPair { .. }
                        | RolloutError::NoAbsorbedTrajectories { .. }),
                    ) => {
                        warnings.push(format!("{name}: {e}"));
                        summaries.push(format!("{name} not simulable ({e})"));
                        RolloutArtifact {
                            policy: name.to_string(),
                            initial_dist: r.initial_dist,
                            stats: None,
                            failure: Some(e.to_string()),
                        }
                    }
                    Err(e) => return Err(runtime(&format!("rollouts for {name}"), e)),
                };
                write_json(
                    &ctx.path(&format!("simulate/rollout_{name}.json")),
                    &artifact,
                )?;
            }
            Ok(StageOutput {
                files: vec![
                    "simulate/rollout_behavior.json".into(),
                    "simulate/rollout_optimal.json".into(),
                ],
                warnings,
                summary: summaries.join(", "),
            })
        },
    )
}

pub fn stage_analyze(ctx: &Ctx) -> Result<bool, CliError> {
    let internal = vec![
        "ingest/train.jsonl".to_string(),
        "ingest/eval.jsonl".to_string(),
        "discretize/model.json".to_string(),
        "discretize/train.json".to_string(),
        "solve/policy.json".to_string(),
    ];
    run_stage(
        ctx,
        "analyze",
        ctx.cfg.analysis.classifier.seed,
        &internal,
        &[],
        || {
            let train =
                load_cohort_file(&ctx.path("ingest/train.jsonl"), InputFormat::Jsonl, true)?;
            let eval = load_cohort_file(&ctx.path("ingest/eval.jsonl"), InputFormat::Jsonl, true)?;
            let model: DiscretizationModel = read_json(&ctx.path("discretize/model.json"))?;
            let train_d: DiscreteDataset = read_json(&ctx.path("discretize/train.json"))?;
            let policy: Policy = read_json(&ctx.path("solve/policy.json"))?;
            let a = &ctx.cfg.analysis;
            let mut files: Vec<String> = Vec::new();
            let mut warnings = Vec::new();

            let agreement = dosewise_core::ope::agreement_histogram(&train_d, &policy, a.threshold)
                .map_err(|e| runtime("agreement", e))?;
            write_json(&ctx.path("analyze/agreement.json"), &agreement)?;
            files.push("analyze/agreement.json".into());

            let bins = a
                .gap_bins
                .clone()
                .map(BinSpec::Edges)
                .unwrap_or(BinSpec::Deciles);
            for (axis, tag) in [(DrugAxis::Fluid, "fluid"), (DrugAxis::Vaso, "vaso")] {
                let curve = dose_gap(&eval, &model, &policy, a.gap_mode, axis, &bins)
                    .map_err(|e| runtime(&format!("dose gap ({tag})"), e))?;
                if !curve.empty_bins.is_empty() {
                    warnings.push(format!(
                        "dose gap ({tag}): empty bins {:?}",
                        curve.empty_bins
                    ));
                }
                write_json(&ctx.path(&format!("analyze/dose_gap_{tag}.json")), &curve)?;
                write_bytes(
                    &ctx.path(&format!("analyze/dose_gap_{tag}.csv")),
                    gap_curve_csv(&curve).as_bytes(),
                )?;
                files.push(format!("analyze/dose_gap_{tag}.json"));
                files.push(format!("analyze/dose_gap_{tag}.csv"));
            }

            let (x, names) = feature_matrix(&train);
            let y_behavior = behavior_drug_labels(&train, a.importance_axis);
            let y_ai = ai_drug_labels(&train, &model, &policy, a.importance_axis)
                .map_err(|e| runtime("policy labels", e))?;
            let icfg = ImportanceConfig {
                trees: a.classifier.trees,
                max_depth: a.classifier.max_depth,
                permutations: a.classifier.permutations,
                seed: a.classifier.seed,
            };
            let run_importance = |y: &[bool]| permutation_importance(&x, y, &names, &icfg);
            let importance = match (run_importance(&y_behavior), run_importance(&y_ai)) {
                (Ok(behavior), Ok(ai)) => {
                    let comparison = compare_importances(&behavior, &ai)
                        .map_err(|e| runtime("comparison", e))?;
                    write_bytes(
                        &ctx.path("analyze/importance_comparison.csv"),
                        comparison_csv(&comparison).as_bytes(),
                    )?;
                    files.push("analyze/importance_comparison.csv".into());
                    ImportanceArtifact {
                        axis: a.importance_axis,
                        behavior: Some(behavior),
                        ai: Some(ai),
                        comparison: Some(comparison),
                        failure: None,
                    }
                }
                (
                    Err(e @ (InsightError::SingleClassTarget | InsightError::TooFewSamples { .. })),
                    _,
                )
                | (
                    _,
                    Err(e @ (InsightError::SingleClassTarget | InsightError::TooFewSamples { .. })),
                ) => {
                    warnings.push(format!("importance: {e}"));
                    ImportanceArtifact {
                        axis: a.importance_axis,
                        behavior: None,
                        ai: None,
                        comparison: None,
                        failure: Some(e.to_string()),
                    }
                }
                (Err(e), _) | (_, Err(e)) => return Err(runtime("importance", e)),
            };
            write_json(&ctx.path("analyze/importance.json"), &importance)?;
            files.push("analyze/importance.json".into());

            Ok(StageOutput {
                files,
                warnings,
                summary: format!(
                    "{} of {} visited states agree above {:.0}%",
                    agreement.above_threshold,
                    agreement.visited_count,
                    a.threshold * 100.0
                ),
            })
        },
    )
}

/// All stages in data order; `synth` first when configured.
pub fn run_pipeline(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.cfg.synth.is_some() {
        stage_synth(ctx)?;
    }
    stage_ingest(ctx)?;
    stage_discretize(ctx)?;
    stage_estimate(ctx)?;
    stage_solve(ctx)?;
    stage_evaluate(ctx)?;
    stage_simulate(ctx)?;
    stage_analyze(ctx)?;
    println!("pipeline: complete ({})", ctx.run_dir.display());
    Ok(())
}
