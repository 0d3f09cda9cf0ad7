//! Hash-stamped artifact plumbing.
//!
//! Every stage writes its outputs plus a `manifest.json` recording the
//! producing config snapshot, the hashes of everything it read, and the
//! hashes of everything it wrote. Downstream stages refuse to consume an
//! artifact whose bytes no longer match its manifest, and a stage whose
//! recorded inputs and outputs all still match is skipped as up to date.
//!
//! Manifests deliberately contain no timestamps or durations: rerunning the
//! same configuration must reproduce every byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub run_id: String,
    /// Primary seed the stage ran with (0 when the stage draws no randomness).
    pub seed: u64,
    /// Full effective config snapshot, identical across all manifests of a run.
    pub config: Value,
    /// What the stage read: run-relative artifact paths or external file
    /// paths, each with the SHA-256 observed at build time.
    pub inputs: BTreeMap<String, String>,
    /// What the stage wrote, with the SHA-256 of the written bytes.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline — the one serialization every JSON
/// artifact uses, so byte-level comparisons are meaningful.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Runtime(format!(
            "{} is not valid for its expected schema: {e}",
            path.display()
        ))
    })
}

/// Load a stage manifest if that stage has run in this run directory.
pub fn load_manifest(run_dir: &Path, stage: &str) -> Result<Option<Manifest>, CliError> {
    let path = run_dir.join(stage).join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json(&path)?))
}

/// Verify a run-relative artifact against the manifest of the stage that
/// produced it (the first path component). Returns the verified hash.
pub fn verify_artifact(run_dir: &Path, rel: &str) -> Result<String, CliError> {
    let producer = rel.split('/').next().unwrap_or(rel);
    let manifest = load_manifest(run_dir, producer)?.ok_or_else(|| {
        CliError::MissingArtifact(format!(
            "{rel} has no manifest; run the `{producer}` stage first"
        ))
    })?;
    let expected = manifest.outputs.get(rel).ok_or_else(|| {
        CliError::MissingArtifact(format!("{rel} is not an output of the `{producer}` stage"))
    })?;
    let path = run_dir.join(rel);
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "{rel} is recorded in the `{producer}` manifest but missing on disk; rerun `{producer}`"
        )));
    }
    let actual = sha256_file(&path)?;
    if &actual != expected {
        return Err(CliError::HashMismatch(format!(
            "{rel} changed since it was built (recorded {expected}, found {actual})"
        )));
    }
    Ok(actual)
}

/// True when every recorded output still exists with its recorded hash.
pub fn outputs_clean(run_dir: &Path, manifest: &Manifest) -> Result<bool, CliError> {
    for (rel, expected) in &manifest.outputs {
        let path = run_dir.join(rel);
        if !path.exists() || &sha256_file(&path)? != expected {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips_and_artifact_verification_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        write_bytes(&run.join("stage/out.txt"), b"payload").unwrap();
        let hash = sha256_file(&run.join("stage/out.txt")).unwrap();
        let manifest = Manifest {
            stage: "stage".into(),
            version: "0.0.0".into(),
            run_id: "deadbeefdeadbeef".into(),
            seed: 7,
            config: serde_json::json!({"k": 1}),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::from([("stage/out.txt".to_string(), hash.clone())]),
            warnings: vec![],
        };
        write_json(&run.join("stage/manifest.json"), &manifest).unwrap();

        assert_eq!(load_manifest(run, "stage").unwrap().unwrap(), manifest);
        assert_eq!(verify_artifact(run, "stage/out.txt").unwrap(), hash);
        assert!(outputs_clean(run, &manifest).unwrap());

        write_bytes(&run.join("stage/out.txt"), b"tampered").unwrap();
        let err = verify_artifact(run, "stage/out.txt").unwrap_err();
        assert!(matches!(err, CliError::HashMismatch(_)), "{err}");
        assert!(!outputs_clean(run, &manifest).unwrap());

        fs::remove_file(run.join("stage/out.txt")).unwrap();
        let err = verify_artifact(run, "stage/out.txt").unwrap_err();
        assert!(matches!(err, CliError::MissingArtifact(_)), "{err}");

        let err = verify_artifact(run, "other/out.txt").unwrap_err();
        assert!(matches!(err, CliError::MissingArtifact(_)), "{err}");
    }
}
