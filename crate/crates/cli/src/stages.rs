//! Pipeline stages and their artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use graybox_core::calibrate::{
    calibrate_pgm, calibrate_sgm, device_expected_agf, evaluate_calibration, write_agf_samples_csv,
    write_calibration_csv, write_channel_jsd_csv, write_trace_csv, CalibrationEvaluation, CalibrationResult,
    CalibrationRow, EvaluationSettings,
};
use graybox_core::dataset::{self, DatasetMetadata, ExperimentRecord};
use graybox_core::device::Device;
use graybox_core::eval::{self, Backends, SweepSettings};
use graybox_core::models::pgm::{pgm_posterior_predictive, pgm_train, VariationalParams};
use graybox_core::models::sgm::{sgm_predict, sgm_train};
use graybox_core::models::{Checkpoint, ModelKind, WhiteboxCache, ARCHITECTURE};
use graybox_core::nn::BlackboxParams;
use graybox_core::quantum::{Operator2, NUM_CHANNELS};
use graybox_core::seed::{child_seed, rng_for};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::estimator::{verify_estimator, write_report};
use crate::CliError;

pub const DATASET: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset.meta.json";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_AGF: &str = "sweep_agf_samples.csv";
pub const SWEEP_EXPECTATIONS: &str = "sweep_expectation_samples.csv";
pub const EVALUATION: &str = "evaluation.csv";
pub const EVALUATION_SUMMARY: &str = "evaluation.json";
pub const ESTIMATOR: &str = "verify_estimator.csv";

fn model_name(model: ModelKind) -> &'static str {
    match model {
        ModelKind::Sgm => "sgm",
        ModelKind::Pgm => "pgm",
    }
}

pub fn checkpoint_file(model: ModelKind) -> String {
    format!("{}.checkpoint.json", model_name(model))
}

pub fn trace_file(model: ModelKind) -> String {
    match model {
        ModelKind::Sgm => "sgm_loss.csv".into(),
        ModelKind::Pgm => "pgm_elbo.csv".into(),
    }
}

pub fn calibration_file(model: ModelKind) -> String {
    format!("calibration_{}.json", model_name(model))
}

pub fn calibration_trace_file(model: ModelKind) -> String {
    format!("calibration_{}_trace.csv", model_name(model))
}

/// One pipeline step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "model", rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train(ModelKind),
    Sweep,
    Calibrate(ModelKind),
    Eval,
    VerifyEstimator,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::GenData => "gen-data".into(),
            Stage::Train(m) => format!("train-{}", model_name(*m)),
            Stage::Sweep => "sweep".into(),
            Stage::Calibrate(m) => format!("calibrate-{}", model_name(*m)),
            Stage::Eval => "eval".into(),
            Stage::VerifyEstimator => "verify-estimator".into(),
        }
    }

    pub fn manifest_file(&self) -> String {
        format!("manifest_{}.json", self.name())
    }

    /// Files this stage reads from the output directory.
    pub fn inputs(&self) -> Vec<String> {
        let both = [ModelKind::Sgm, ModelKind::Pgm];
        match self {
            Stage::GenData | Stage::VerifyEstimator => vec![],
            Stage::Train(_) => vec![DATASET.into()],
            Stage::Sweep => both.iter().map(|m| checkpoint_file(*m)).collect(),
            Stage::Calibrate(m) => vec![checkpoint_file(*m)],
            Stage::Eval => both
                .iter()
                .flat_map(|m| [checkpoint_file(*m), calibration_file(*m)])
                .collect(),
        }
    }
}

/// What a stage produced.
pub struct StageOutput {
    pub artifacts: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Stage-specific figures worth surfacing (also kept in the manifest).
    pub summary: Value,
    /// Whether a built-in validation check failed.
    pub validation_failed: bool,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(graybox_core::Error::from)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn read_input(dir: &Path, name: &str) -> Result<Vec<u8>, CliError> {
    std::fs::read(dir.join(name)).map_err(|e| {
        CliError::Config(format!("missing input {} in {}: {e}", name, dir.display()))
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ExperimentRecord>, CliError> {
    Ok(dataset::read_csv(read_input(dir, DATASET)?.as_slice())?)
}

pub fn load_checkpoint(dir: &Path, model: ModelKind) -> Result<Checkpoint, CliError> {
    let bytes = read_input(dir, &checkpoint_file(model))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint_file(model))))?;
    if ck.model != model {
        return Err(CliError::Config(format!("{} holds a {:?} model", checkpoint_file(model), ck.model)));
    }
    ck.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(ck)
}

pub fn load_sgm(dir: &Path) -> Result<BlackboxParams, CliError> {
    Ok(BlackboxParams::new(load_checkpoint(dir, ModelKind::Sgm)?.parameters)?)
}

pub fn load_pgm(dir: &Path) -> Result<VariationalParams, CliError> {
    Ok(VariationalParams::from_flat(load_checkpoint(dir, ModelKind::Pgm)?.parameters)?)
}

pub fn load_calibration(dir: &Path, model: ModelKind) -> Result<CalibrationResult, CliError> {
    let bytes = read_input(dir, &calibration_file(model))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", calibration_file(model))))
}

/// Named seeds derived from the master seed.
pub fn seed(cfg: &RunConfig, label: &str) -> u64 {
    child_seed(cfg.master_seed, label, 0)
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageOutput, CliError> {
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir)?;
    match stage {
        Stage::GenData => gen_data(cfg, dir),
        Stage::Train(m) => train(cfg, dir, m),
        Stage::Sweep => sweep(cfg, dir),
        Stage::Calibrate(m) => calibrate(cfg, dir, m),
        Stage::Eval => evaluate(cfg, dir),
        Stage::VerifyEstimator => estimator(cfg, dir),
    }
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, CliError> {
    let s = seed(cfg, "dataset");
    let device = Device::new(&cfg.device, &cfg.noise)?;
    let d = &cfg.dataset;
    let records = dataset::generate_dataset(&device, d.samples, d.n_shots, d.trajectories, s)?;
    let mut out = create(dir, DATASET)?;
    dataset::write_csv(&records, &mut out)?;
    drop(out);
    let hash = dataset::dataset_hash(&records)?;
    let meta = DatasetMetadata {
        device: cfg.device.clone(),
        noise: cfg.noise.clone(),
        seed: s,
        samples: d.samples,
        n_shots: d.n_shots,
        trajectories: d.trajectories,
    };
    write_json(dir, DATASET_META, &json!({ "metadata": meta, "sha256": hash }))?;
    Ok(StageOutput {
        artifacts: vec![DATASET.into(), DATASET_META.into()],
        seeds: seeds(&[("dataset", s)]),
        summary: json!({ "records": records.len(), "sha256": hash }),
        validation_failed: false,
    })
}

/// Mean squared error and shot-noise floor `(1 − ŷ²)/n` over a test set.
fn sgm_test_metrics(params: &BlackboxParams, test: &[ExperimentRecord], cache: &WhiteboxCache) -> Result<(f64, f64), CliError> {
    let mut mse = 0.0;
    let mut floor = 0.0;
    for r in test {
        let y = sgm_predict(params, r.theta, cache)?;
        for c in 0..NUM_CHANNELS {
            mse += (y.0[c] - r.exps.0[c]).powi(2);
            floor += (1.0 - y.0[c] * y.0[c]) / r.n_shots as f64;
        }
    }
    let k = (test.len() * NUM_CHANNELS) as f64;
    Ok((mse / k, floor / k))
}

/// Fraction of labels inside the central 95% posterior-predictive interval.
fn pgm_coverage(vparams: &VariationalParams, records: &[ExperimentRecord], cache: &WhiteboxCache, seed: u64) -> Result<f64, CliError> {
    let mut inside = 0usize;
    for (i, r) in records.iter().enumerate() {
        let dist = pgm_posterior_predictive(vparams, r.theta, cache, r.n_shots, 1000, &mut rng_for(seed, "coverage", i as u64))?;
        for c in 0..NUM_CHANNELS {
            let ch = dist.channel(c);
            let (lo, hi) = (eval::quantile(&ch, 0.025), eval::quantile(&ch, 0.975));
            if (lo..=hi).contains(&r.exps.0[c]) {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / (records.len() * NUM_CHANNELS) as f64)
}

fn train(cfg: &RunConfig, dir: &Path, model: ModelKind) -> Result<StageOutput, CliError> {
    let records = load_dataset(dir)?;
    let hash = dataset::dataset_hash(&records)?;
    let split_seed = seed(cfg, "split");
    let split = dataset::split(&records, cfg.dataset.train_fraction, split_seed)?;
    let mut cache = WhiteboxCache::new(&cfg.device)?;
    let name = model_name(model);
    let train_seed = seed(cfg, &format!("train-{name}"));
    let (parameters, trace_header, trace, metrics, hyper) = match model {
        ModelKind::Sgm => {
            let out = sgm_train(&split.train, &mut cache, &cfg.training.sgm, train_seed)?;
            cache.fill(split.test.iter().map(|r| r.theta))?;
            let (mse, floor) = sgm_test_metrics(&out.params, &split.test, &cache)?;
            let metrics = json!({
                "final_loss": out.loss_trace.last(),
                "test_mse": mse,
                "shot_noise_floor": floor,
            });
            let hyper = serde_json::to_value(&cfg.training.sgm).map_err(graybox_core::Error::from)?;
            (out.params.into_inner(), "loss", out.loss_trace, metrics, hyper)
        }
        ModelKind::Pgm => {
            let out = pgm_train(&split.train, &mut cache, &cfg.training.pgm, train_seed)?;
            let coverage = pgm_coverage(&out.vparams, &split.train, &cache, train_seed)?;
            let mut mean_within = 0usize;
            for (i, r) in split.train.iter().enumerate() {
                let dist = pgm_posterior_predictive(&out.vparams, r.theta, &cache, r.n_shots, 1000, &mut rng_for(train_seed, "label-check", i as u64))?;
                let (m, v) = (dist.mean(), dist.variance());
                for c in 0..NUM_CHANNELS {
                    if (m.0[c] - r.exps.0[c]).abs() <= 3.0 * v.0[c].sqrt() {
                        mean_within += 1;
                    }
                }
            }
            let metrics = json!({
                "final_elbo": out.elbo_trace.last(),
                "train_coverage_95": coverage,
                "train_mean_within_3sd": mean_within as f64 / (split.train.len() * NUM_CHANNELS) as f64,
            });
            let hyper = serde_json::to_value(&cfg.training.pgm).map_err(graybox_core::Error::from)?;
            (out.vparams.to_flat(), "elbo", out.elbo_trace, metrics, hyper)
        }
    };
    let checkpoint = Checkpoint {
        architecture: ARCHITECTURE.into(),
        model,
        parameters,
        metadata: json!({
            "seeds": { "master": cfg.master_seed, "split": split_seed, "train": train_seed },
            "hyperparameters": hyper,
            "device": cfg.device,
            "dataset_sha256": hash,
            "train_size": split.train.len(),
            "test_size": split.test.len(),
            "metrics": metrics,
        }),
    };
    write_json(dir, &checkpoint_file(model), &checkpoint)?;
    let mut w = csv::Writer::from_writer(create(dir, &trace_file(model))?);
    w.write_record(["epoch", trace_header]).map_err(graybox_core::Error::from)?;
    for (i, v) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.16e}")]).map_err(graybox_core::Error::from)?;
    }
    w.flush()?;
    Ok(StageOutput {
        artifacts: vec![checkpoint_file(model), trace_file(model)],
        seeds: seeds(&[("split", split_seed), ("train", train_seed)]),
        summary: metrics,
        validation_failed: false,
    })
}

fn sweep(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, CliError> {
    let sgm = load_sgm(dir)?;
    let pgm = load_pgm(dir)?;
    let device = Device::new(&cfg.device, &cfg.noise)?;
    let mut cache = WhiteboxCache::new(&cfg.device)?;
    let grid = eval::grid(cfg.sweep.lo, cfg.sweep.hi, cfg.sweep.count)?;
    let s = seed(cfg, "sweep");
    let backends = Backends {
        device: &device,
        sgm: Some(&sgm),
        pgm: Some(&pgm),
    };
    let settings = SweepSettings {
        n_shots: cfg.dataset.n_shots,
        n_repeats: cfg.sweep.n_repeats,
        trajectories: cfg.dataset.trajectories,
    };
    let result = eval::sweep(&backends, &mut cache, &grid, settings, s)?;
    result.write_csv(create(dir, SWEEP)?)?;
    result.write_agf_samples(create(dir, SWEEP_AGF)?)?;
    result.write_expectation_samples(create(dir, SWEEP_EXPECTATIONS)?)?;
    Ok(StageOutput {
        artifacts: vec![SWEEP.into(), SWEEP_AGF.into(), SWEEP_EXPECTATIONS.into()],
        seeds: seeds(&[("sweep", s)]),
        summary: json!({
            "mean_jsd_sgm": result.mean_jsd_sgm(),
            "mean_jsd_pgm": result.mean_jsd_pgm(),
        }),
        validation_failed: false,
    })
}

fn calibrate(cfg: &RunConfig, dir: &Path, model: ModelKind) -> Result<StageOutput, CliError> {
    let cache = WhiteboxCache::new(&cfg.device)?;
    let target = Operator2::sqrt_x();
    let s = seed(cfg, &format!("calibrate-{}", model_name(model)));
    let result = match model {
        ModelKind::Sgm => calibrate_sgm(&load_sgm(dir)?, &cache, &target, &cfg.calibration.sgm, s)?,
        ModelKind::Pgm => calibrate_pgm(
            &load_pgm(dir)?,
            &cache,
            &target,
            cfg.calibration.n_shots,
            &cfg.calibration.pgm,
            s,
        )?,
    };
    write_json(dir, &calibration_file(model), &result)?;
    write_trace_csv(&result, create(dir, &calibration_trace_file(model))?)?;
    Ok(StageOutput {
        artifacts: vec![calibration_file(model), calibration_trace_file(model)],
        seeds: seeds(&[("calibrate", s)]),
        summary: json!({
            "theta_star": result.theta_star,
            "initial_theta": result.initial_theta,
            "final_objective": result.trace.last().map(|p| p.objective),
        }),
        validation_failed: false,
    })
}

/// Figures for one calibrated control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationEntry {
    pub model: ModelKind,
    pub theta_star: f64,
    pub device_ensemble_agf: f64,
    pub expected_agf_device: f64,
    pub expected_agf_sgm: f64,
    pub expected_agf_pgm: f64,
    pub jsd_sgm: f64,
    pub jsd_pgm: f64,
    pub ratio: f64,
    pub max_agf_sample: f64,
}

/// Contents of the evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub entries: Vec<EvaluationEntry>,
    /// Device-expected AGF at the sweep-window edges.
    pub edge_thetas: Vec<f64>,
    pub edge_agf: Vec<f64>,
}

fn entry(result: &CalibrationResult, e: &CalibrationEvaluation) -> EvaluationEntry {
    EvaluationEntry {
        model: result.model,
        theta_star: result.theta_star,
        device_ensemble_agf: e.device_ensemble_agf,
        expected_agf_device: e.expected_agf_device,
        expected_agf_sgm: e.expected_agf_sgm,
        expected_agf_pgm: e.expected_agf_pgm,
        jsd_sgm: e.jsd_sgm,
        jsd_pgm: e.jsd_pgm,
        ratio: e.ratio(),
        max_agf_sample: e
            .agf_device
            .iter()
            .chain(&e.agf_sgm)
            .chain(&e.agf_pgm)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
    }
}

fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, CliError> {
    let sgm = load_sgm(dir)?;
    let pgm = load_pgm(dir)?;
    let device = Device::new(&cfg.device, &cfg.noise)?;
    let mut cache = WhiteboxCache::new(&cfg.device)?;
    let s = seed(cfg, "eval");
    let settings = EvaluationSettings {
        n_shots: cfg.dataset.n_shots,
        n_repeats: cfg.evaluation.n_repeats,
        trajectories: cfg.dataset.trajectories,
    };
    let mut results = Vec::new();
    let mut evaluations = Vec::new();
    let mut artifacts = vec![EVALUATION.to_string(), EVALUATION_SUMMARY.to_string()];
    for (i, model) in [ModelKind::Sgm, ModelKind::Pgm].into_iter().enumerate() {
        let result = load_calibration(dir, model)?;
        let e = evaluate_calibration(result.theta_star, &device, &mut cache, &sgm, &pgm, settings, child_seed(s, "point", i as u64))?;
        let name = model_name(model);
        let jsd_file = format!("eval_{name}_channel_jsd.csv");
        let agf_file = format!("eval_{name}_agf_samples.csv");
        write_channel_jsd_csv(&e, create(dir, &jsd_file)?)?;
        write_agf_samples_csv(&e, create(dir, &agf_file)?)?;
        artifacts.extend([jsd_file, agf_file]);
        results.push(result);
        evaluations.push(e);
    }
    let rows: Vec<CalibrationRow> = results
        .iter()
        .zip(&evaluations)
        .map(|(result, evaluation)| CalibrationRow { result, evaluation })
        .collect();
    write_calibration_csv(&rows, create(dir, EVALUATION)?)?;
    let edge_thetas = vec![cfg.sweep.lo, cfg.sweep.hi];
    let edge_agf = device_expected_agf(&device, &edge_thetas, cfg.dataset.trajectories, child_seed(s, "edges", 0))?;
    let summary = EvaluationSummary {
        entries: results.iter().zip(&evaluations).map(|(r, e)| entry(r, e)).collect(),
        edge_thetas,
        edge_agf,
    };
    write_json(dir, EVALUATION_SUMMARY, &summary)?;
    Ok(StageOutput {
        artifacts,
        seeds: seeds(&[("eval", s)]),
        summary: serde_json::to_value(&summary).map_err(graybox_core::Error::from)?,
        validation_failed: false,
    })
}

fn estimator(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, CliError> {
    let s = seed(cfg, "verify-estimator");
    let rows = verify_estimator(&cfg.estimator, s)?;
    write_report(&rows, create(dir, ESTIMATOR)?)?;
    let failed = rows.iter().any(|r| !r.pass);
    Ok(StageOutput {
        artifacts: vec![ESTIMATOR.into()],
        seeds: seeds(&[("verify-estimator", s)]),
        summary: serde_json::to_value(&rows).map_err(graybox_core::Error::from)?,
        validation_failed: failed,
    })
}

/// Path of an artifact inside the configured output directory.
pub fn artifact_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}
