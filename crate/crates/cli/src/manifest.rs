//! Run manifests and replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graybox_core::dataset::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::stages::{run_stage, Stage};
use crate::CliError;

/// A file and its SHA-256 digest, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run one stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Stage,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub wall_clock_seconds: f64,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    pub summary: Value,
}

fn hash_file(dir: &Path, name: &str) -> Result<FileHash, CliError> {
    let bytes = std::fs::read(dir.join(name))
        .map_err(|e| CliError::Config(format!("missing input {} in {}: {e}", name, dir.display())))?;
    Ok(FileHash {
        path: name.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Result of [`execute`]: the manifest and whether the stage's own checks failed.
pub struct Execution {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub validation_failed: bool,
}

/// Run a stage and write `manifest_<stage>.json` next to its artifacts.
pub fn execute(cfg: &RunConfig, stage: Stage) -> Result<Execution, CliError> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let inputs = stage
        .inputs()
        .iter()
        .map(|name| hash_file(&dir, name))
        .collect::<Result<Vec<_>, _>>()?;
    let start = Instant::now();
    let output = run_stage(cfg, stage)?;
    let wall_clock_seconds = start.elapsed().as_secs_f64();
    let artifacts = output
        .artifacts
        .iter()
        .map(|name| hash_file(&dir, name))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        command: stage,
        config: cfg.clone(),
        seeds: output.seeds,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds,
        inputs,
        artifacts,
        summary: output.summary,
    };
    let manifest_path = dir.join(stage.manifest_file());
    let text = serde_json::to_string_pretty(&manifest).map_err(graybox_core::Error::from)?;
    std::fs::write(&manifest_path, text + "\n")?;
    Ok(Execution {
        manifest,
        manifest_path,
        validation_failed: output.validation_failed,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Outcome of a replay.
#[derive(Debug)]
pub struct ReplayReport {
    pub stage: Stage,
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
}

impl ReplayReport {
    pub fn is_match(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-run the stage recorded in `manifest_path` inside `out`.
///
/// Inputs are copied from the manifest's directory and checked against their
/// recorded digests before the stage runs. Artifact digests are compared after.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport, CliError> {
    let manifest = read_manifest(manifest_path)?;
    let source = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out)?;
    for input in &manifest.inputs {
        let found = hash_file(source, &input.path)?;
        if found.sha256 != input.sha256 {
            return Err(CliError::Validation(format!(
                "input {} changed since the manifest was written",
                input.path
            )));
        }
        std::fs::copy(source.join(&input.path), out.join(&input.path))?;
    }
    let mut cfg = manifest.config.clone();
    cfg.output_dir = out.to_path_buf();
    let rerun = execute(&cfg, manifest.command)?;
    let fresh: BTreeMap<_, _> = rerun
        .manifest
        .artifacts
        .iter()
        .map(|a| (a.path.clone(), a.sha256.clone()))
        .collect();
    let mut report = ReplayReport {
        stage: manifest.command,
        matched: vec![],
        mismatched: vec![],
    };
    for a in &manifest.artifacts {
        if fresh.get(&a.path) == Some(&a.sha256) {
            report.matched.push(a.path.clone());
        } else {
            report.mismatched.push(a.path.clone());
        }
    }
    Ok(report)
}
