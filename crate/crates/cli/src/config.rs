//! Run configuration: one JSON document, defaults from the reference setup,
//! unknown keys rejected, dotted-path overrides.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use graybox_core::calibrate::CalibrationHyper;
use graybox_core::device::DeviceConfig;
use graybox_core::models::pgm::PgmHyper;
use graybox_core::models::sgm::SgmHyper;
use graybox_core::noise::PsdSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GRAYBOX_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of controls `m`.
    pub samples: usize,
    /// Shots per expectation value `n`.
    pub n_shots: u64,
    /// Noise trajectories per control `M`.
    pub trajectories: usize,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples: 1000,
            n_shots: 1000,
            trajectories: 100,
            train_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub sgm: SgmHyper,
    pub pgm: PgmHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub n_repeats: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lo: 1.3,
            hi: 1.7,
            count: 21,
            n_repeats: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub sgm: CalibrationHyper,
    pub pgm: CalibrationHyper,
    /// Shots behind the target counts of the likelihood objective.
    pub n_shots: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            sgm: CalibrationHyper::sgm(),
            pgm: CalibrationHyper::pgm(),
            n_shots: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_repeats: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { n_repeats: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Hidden expected value μ₀.
    pub mu0: f64,
    pub n_shots: u64,
    pub repeats: usize,
    /// Hidden standard deviations σ₀ to test.
    pub sigma0: Vec<f64>,
    /// Size of the synthetic intermediate ensemble.
    pub ensemble_size: usize,
    /// Mean tolerance in standard errors.
    pub mean_tolerance_se: f64,
    /// Relative variance tolerance.
    pub variance_tolerance: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            mu0: 0.5,
            n_shots: 10_000,
            repeats: 100_000,
            sigma0: vec![0.0, 0.05, 0.1],
            ensemble_size: 100,
            mean_tolerance_se: 5.0,
            variance_tolerance: 0.05,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub device: DeviceConfig,
    pub noise: PsdSpec,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
    pub calibration: CalibrationConfig,
    pub evaluation: EvaluationConfig,
    pub estimator: EstimatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            device: DeviceConfig::default(),
            noise: PsdSpec::default(),
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            sweep: SweepConfig::default(),
            calibration: CalibrationConfig::default(),
            evaluation: EvaluationConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Overlay `patch` onto `base`. Every key in `patch` must already exist in
/// `base`, so misspelled keys are rejected at any depth.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| config_err(format!("unknown key `{sub}`")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parse an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Apply one `dotted.path=value` override.
pub fn apply_override(value: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key.path=value")))?;
    let mut patch = parse_value(raw.trim());
    for key in path.trim().rsplit('.') {
        if key.is_empty() {
            return Err(config_err(format!("empty key in override `{spec}`")));
        }
        let mut obj = serde_json::Map::new();
        obj.insert(key.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(value, patch, "")
}

impl RunConfig {
    /// Defaults, then the optional file, then the output-directory
    /// environment variable, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch, "")?;
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                value["output_dir"] = Value::String(dir);
            }
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: graybox_core::Error| config_err(e.to_string());
        self.device.validate().map_err(wrap)?;
        self.noise.validate().map_err(wrap)?;
        let d = &self.dataset;
        if d.samples < 2 {
            return Err(config_err("dataset.samples must be at least 2"));
        }
        if d.n_shots == 0 || self.calibration.n_shots == 0 || self.estimator.n_shots == 0 {
            return Err(config_err("shot counts must be positive"));
        }
        if d.trajectories == 0 {
            return Err(config_err("dataset.trajectories must be positive"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(config_err(format!("dataset.train_fraction = {} outside (0, 1)", d.train_fraction)));
        }
        let s = &self.sweep;
        let in_range = |t: f64| (0.0..=2.0 * PI).contains(&t);
        if !in_range(s.lo) || !in_range(s.hi) || s.lo > s.hi {
            return Err(config_err(format!("sweep grid [{}, {}] not inside [0, 2π]", s.lo, s.hi)));
        }
        if s.count == 0 || s.n_repeats == 0 || self.evaluation.n_repeats == 0 {
            return Err(config_err("sweep.count and repeat counts must be positive"));
        }
        let t = &self.training;
        if t.sgm.epochs == 0 || t.sgm.batch_size == 0 || t.pgm.epochs == 0 || t.pgm.batch_size == Some(0) {
            return Err(config_err("epochs and batch sizes must be positive"));
        }
        if !(t.pgm.prior_variance > 0.0) {
            return Err(config_err("training.pgm.prior_variance must be positive"));
        }
        for (name, c) in [("sgm", &self.calibration.sgm), ("pgm", &self.calibration.pgm)] {
            let (lo, hi) = c.init_range;
            if c.iterations == 0 || !(0.0 <= lo && lo < hi && hi <= 2.0 * PI) {
                return Err(config_err(format!("calibration.{name}: bad iterations or init_range")));
            }
        }
        let e = &self.estimator;
        if !(-1.0..=1.0).contains(&e.mu0) || e.repeats < 2 || e.ensemble_size == 0 {
            return Err(config_err("estimator: mu0 must lie in [-1, 1] and counts be positive"));
        }
        if e.sigma0.iter().any(|s| !(*s >= 0.0)) {
            return Err(config_err("estimator.sigma0 values must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.device.trotter_steps, 10_000);
        assert_eq!(c.device.noise_strength, 0.01);
        assert_eq!(c.dataset.samples, 1000);
        assert_eq!(c.training.sgm.epochs, 1000);
        assert_eq!(c.training.pgm.epochs, 10_000);
        assert_eq!(c.calibration.pgm.iterations, 1500);
        assert_eq!(c.calibration.pgm.schedule.warmup_steps, 800);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let c = RunConfig::load(
            None,
            &[
                "device.noise_strength=0.05".into(),
                "training.pgm.batch_size=100".into(),
                "output_dir=some/where".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.device.noise_strength, 0.05);
        assert_eq!(c.training.pgm.batch_size, Some(100));
        assert_eq!(c.output_dir, PathBuf::from("some/where"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in [
            "device.delta_noise=0.05",
            "nonsense=1",
            "sweep.hi=7.0",
            "dataset.n_shots=0",
            "dataset.train_fraction=1.0",
            "device.trotter_steps=\"many\"",
            "no_equals_sign",
        ] {
            let err = RunConfig::load(None, &[bad.into()]).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn partial_file_keeps_block_defaults() {
        let dir = std::env::temp_dir().join(format!("graybox-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"calibration": {"pgm": {"iterations": 10}}}"#).unwrap();
        let c = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(c.calibration.pgm.iterations, 10);
        assert_eq!(c.calibration.pgm.schedule.warmup_steps, 800);
        std::fs::write(&path, r#"{"calibration": {"pgm": {"iteration": 10}}}"#).unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
