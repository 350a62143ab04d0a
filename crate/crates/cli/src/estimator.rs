//! Monte Carlo check of the finite-shot estimator under a random hidden
//! expectation value: its mean is the hidden mean μ₀ and its variance is
//! `(1 − μ₀²)/n` whatever the hidden spread.

use std::io::Write;

use graybox_core::distribution::ShotSampler;
use graybox_core::seed::{child_seed, rng_for};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::EstimatorConfig;
use crate::CliError;

const CHUNK: usize = 1000;

/// Outcome for one hidden standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorRow {
    pub sigma0: f64,
    pub mu0: f64,
    pub n_shots: u64,
    pub repeats: usize,
    pub empirical_mean: f64,
    pub standard_error: f64,
    pub mean_z: f64,
    pub empirical_variance: f64,
    pub predicted_variance: f64,
    pub variance_rel_error: f64,
    pub pass: bool,
}

/// `size` values with sample mean `mu0` and population standard deviation
/// `sigma0`, obtained by standardizing Gaussian draws.
pub fn hidden_ensemble(mu0: f64, sigma0: f64, size: usize, seed: u64) -> Vec<f64> {
    if sigma0 == 0.0 || size == 1 {
        return vec![mu0; size];
    }
    let mut rng = rng_for(seed, "estimator-hidden", 0);
    let z: Vec<f64> = (0..size).map(|_| StandardNormal.sample(&mut rng)).collect();
    let m = z.iter().sum::<f64>() / size as f64;
    let sd = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / size as f64).sqrt();
    z.iter().map(|v| mu0 + sigma0 * (v - m) / sd).collect()
}

/// Run the check for every configured σ₀.
pub fn verify_estimator(cfg: &EstimatorConfig, seed: u64) -> Result<Vec<EstimatorRow>, CliError> {
    cfg.sigma0
        .iter()
        .enumerate()
        .map(|(i, &sigma0)| {
            let seed = child_seed(seed, "estimator", i as u64);
            let hidden = hidden_ensemble(cfg.mu0, sigma0, cfg.ensemble_size, seed);
            let sampler = ShotSampler::new(&hidden).map_err(|e| {
                CliError::Config(format!("sigma0 = {sigma0} pushes the hidden ensemble outside [-1, 1]: {e}"))
            })?;
            let n_chunks = cfg.repeats.div_ceil(CHUNK);
            let samples: Vec<f64> = (0..n_chunks)
                .into_par_iter()
                .flat_map_iter(|c| {
                    let mut rng = rng_for(seed, "estimator-shots", c as u64);
                    let len = CHUNK.min(cfg.repeats - c * CHUNK);
                    let sampler = &sampler;
                    (0..len)
                        .map(|_| sampler.sample(cfg.n_shots, &mut rng))
                        .collect::<Vec<_>>()
                })
                .collect();
            let r = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / r;
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0);
            let se = (var / r).sqrt();
            let predicted = (1.0 - cfg.mu0 * cfg.mu0) / cfg.n_shots as f64;
            let mean_z = if se > 0.0 { (mean - cfg.mu0) / se } else { 0.0 };
            let rel = (var - predicted).abs() / predicted;
            Ok(EstimatorRow {
                sigma0,
                mu0: cfg.mu0,
                n_shots: cfg.n_shots,
                repeats: cfg.repeats,
                empirical_mean: mean,
                standard_error: se,
                mean_z,
                empirical_variance: var,
                predicted_variance: predicted,
                variance_rel_error: rel,
                pass: mean_z.abs() <= cfg.mean_tolerance_se && rel <= cfg.variance_tolerance,
            })
        })
        .collect()
}

pub fn write_report<W: Write>(rows: &[EstimatorRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(graybox_core::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
