//! Characterization datasets: generation, CSV persistence, validation and
//! train/test splitting.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{finite_shot_sample, ControlParams, Device, DeviceConfig};
use crate::error::{validation, Error, Result};
use crate::noise::PsdSpec;
use crate::quantum::{Channel, Expectations, NUM_CHANNELS};
use crate::seed::{child_seed, rng_for};

/// One measured control setting: θ and its 18 finite-shot expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub theta: f64,
    pub n_shots: u64,
    pub exps: Expectations,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if self.n_shots == 0 {
            return Err(validation("n_shots must be positive"));
        }
        if !(0.0..=2.0 * PI).contains(&self.theta) {
            return Err(validation(format!("theta = {} outside [0, 2π]", self.theta)));
        }
        let n = self.n_shots as f64;
        for (i, &v) in self.exps.0.iter().enumerate() {
            let name = Channel::from_index(i).column_name();
            if !(-1.0..=1.0).contains(&v) {
                return Err(validation(format!("{name} = {v} outside [-1, 1]")));
            }
            let k = (1.0 + v) * n / 2.0;
            if (k - k.round()).abs() > 1e-6 {
                return Err(validation(format!(
                    "{name} = {v} is not a multiple of 2/{} away from -1",
                    self.n_shots
                )));
            }
        }
        Ok(())
    }
}

/// Provenance stored next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub device: DeviceConfig,
    pub noise: PsdSpec,
    pub seed: u64,
    pub samples: usize,
    pub n_shots: u64,
    pub trajectories: usize,
}

/// Measure the device at the given controls.
///
/// Record `i` uses the trajectory seed and shot stream derived from
/// `(seed, i)`, so the output does not depend on thread scheduling.
pub fn measure_at(
    device: &Device,
    thetas: &[f64],
    n_shots: u64,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<ExperimentRecord>> {
    if n_shots == 0 {
        return Err(validation("n_shots must be positive"));
    }
    thetas
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let params = ControlParams::new(theta)?;
            let ensemble =
                device.intermediate_ensemble(&params, trajectories, child_seed(seed, "ensemble", i as u64))?;
            let mut rng = rng_for(seed, "shots", i as u64);
            let dist = finite_shot_sample(&ensemble, n_shots, 1, &mut rng)?;
            Ok(ExperimentRecord {
                theta,
                n_shots,
                exps: dist.samples[0],
            })
        })
        .collect()
}

/// `m` records at controls drawn uniformly from `[0, 2π)`.
pub fn generate_dataset(
    device: &Device,
    m: usize,
    n_shots: u64,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<ExperimentRecord>> {
    if m == 0 {
        return Err(validation("dataset size must be at least 1"));
    }
    let mut rng = rng_for(seed, "theta", 0);
    let thetas: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    measure_at(device, &thetas, n_shots, trajectories, seed)
}

fn header() -> Vec<String> {
    let mut h = vec!["theta".to_string(), "n_shots".to_string()];
    h.extend(Channel::all().map(|c| c.column_name()));
    h
}

fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write records as CSV with 17 significant digits.
pub fn write_csv<W: Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header())?;
    for r in records {
        let mut row = vec![format_value(r.theta), r.n_shots.to_string()];
        row.extend(r.exps.0.iter().map(|&v| format_value(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[ExperimentRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV output is ASCII"))
}

/// Parse and validate a dataset CSV. Errors carry the 1-based data row.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let expected = header();
    let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Row {
            row: 0,
            message: format!("unexpected header {got:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row_err = |message: String| Error::Row {
            row: row_no,
            message,
        };
        let row = row.map_err(|e| row_err(e.to_string()))?;
        if row.len() != expected.len() {
            return Err(row_err(format!("expected {} fields, got {}", expected.len(), row.len())));
        }
        let parse = |j: usize| -> Result<f64> {
            row[j]
                .trim()
                .parse::<f64>()
                .map_err(|e| row_err(format!("{}: {e}", expected[j])))
        };
        let theta = parse(0)?;
        let n_shots = row[1]
            .trim()
            .parse::<u64>()
            .map_err(|e| row_err(format!("n_shots: {e}")))?;
        let mut exps = [0.0; NUM_CHANNELS];
        for (c, e) in exps.iter_mut().enumerate() {
            *e = parse(c + 2)?;
        }
        let record = ExperimentRecord {
            theta,
            n_shots,
            exps: Expectations(exps),
        };
        record.validate().map_err(|e| row_err(e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of the canonical CSV encoding.
pub fn dataset_hash(records: &[ExperimentRecord]) -> Result<String> {
    Ok(sha256_hex(to_csv_string(records)?.as_bytes()))
}

/// Disjoint train/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ExperimentRecord>,
    pub test: Vec<ExperimentRecord>,
    pub seed: u64,
}

/// Shuffle with `seed`; the first `⌊train_frac·m⌋` records train.
pub fn split(records: &[ExperimentRecord], train_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(validation("cannot split an empty dataset"));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(validation(format!("train_frac = {train_frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let n_train = (train_frac * records.len() as f64).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        seed,
    })
}
