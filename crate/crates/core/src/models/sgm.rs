//! Standard graybox model: point-estimate blackbox weights trained by MSE.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bernoulli_resample, check_theta, distribution, graybox_predict, head_gradients, WhiteboxCache};
use crate::dataset::ExperimentRecord;
use crate::distribution::{PredictiveDistribution, Provenance};
use crate::error::{validation, Error, Result};
use crate::nn::optim::{adamw_step, AdamWConfig, OptimizerState, WarmupCosineSchedule};
use crate::nn::{self, BlackboxParams};
use crate::quantum::{Expectations, NUM_CHANNELS};
use crate::seed::{child_seed, rng_for};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgmHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: WarmupCosineSchedule,
    pub optimizer: AdamWConfig,
}

impl Default for SgmHyper {
    fn default() -> Self {
        SgmHyper {
            epochs: 1000,
            batch_size: 100,
            schedule: WarmupCosineSchedule::new(800, 8000),
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Trained weights and the mean batch loss of every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SgmTraining {
    pub params: BlackboxParams,
    pub loss_trace: Vec<f64>,
}

/// Predicted 18-vector at `theta`; the whitebox entry must be cached.
pub fn sgm_predict(params: &BlackboxParams, theta: f64, cache: &WhiteboxCache) -> Result<Expectations> {
    Ok(graybox_predict(params, theta, cache.get(theta)?))
}

/// Mean squared error over channels and records, and its gradient.
pub fn sgm_loss(
    params: &BlackboxParams,
    records: &[&ExperimentRecord],
    cache: &WhiteboxCache,
) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(validation("empty batch"));
    }
    let entries = records
        .iter()
        .map(|r| cache.get(r.theta))
        .collect::<Result<Vec<_>>>()?;
    let thetas: Vec<f64> = records.iter().map(|r| r.theta).collect();
    let norm = 1.0 / (NUM_CHANNELS * records.len()) as f64;
    let (loss, grad) = nn::gradient(params, &thetas, |i, heads| {
        let pred = super::predict_from_heads(heads, entries[i]);
        let mut d_pred = [0.0; NUM_CHANNELS];
        let mut loss = 0.0;
        for c in 0..NUM_CHANNELS {
            let r = pred.0[c] - records[i].exps.0[c];
            loss += r * r * norm;
            d_pred[c] = 2.0 * r * norm;
        }
        (loss, head_gradients(heads, entries[i], &d_pred))
    })
    .map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite {
            context: "SGM loss".into(),
            detail,
        },
        e => e,
    })?;
    Ok((loss, grad))
}

/// Fit blackbox weights by mini-batch AdamW on the MSE.
///
/// Missing whitebox entries are computed first. Each epoch visits the
/// records in a fresh seeded order.
pub fn sgm_train(
    train: &[ExperimentRecord],
    cache: &mut WhiteboxCache,
    hyper: &SgmHyper,
    seed: u64,
) -> Result<SgmTraining> {
    if train.is_empty() {
        return Err(validation("training set is empty"));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(validation("epochs and batch_size must be positive"));
    }
    cache.fill(train.iter().map(|r| r.theta))?;
    let cache = &*cache;
    let mut params = BlackboxParams::init(child_seed(seed, "sgm-init", 0));
    let mut state = OptimizerState::new(nn::NUM_PARAMS, hyper.schedule, hyper.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng_for(seed, "sgm-epoch", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&ExperimentRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = sgm_loss(&params, &batch, cache).map_err(|e| match e {
                Error::NonFinite { context, detail } => Error::NonFinite {
                    context: format!("{context} at epoch {epoch}"),
                    detail,
                },
                e => e,
            })?;
            adamw_step(&mut state, params.as_mut_slice(), &grad);
            total += loss;
            batches += 1;
        }
        loss_trace.push(total / batches as f64);
    }
    Ok(SgmTraining { params, loss_trace })
}

/// Finite-shot vectors obtained by treating the SGM prediction as exact.
pub fn sgm_uncertainty<R: Rng + ?Sized>(
    params: &BlackboxParams,
    theta: f64,
    cache: &WhiteboxCache,
    n_shots: u64,
    n_repeats: usize,
    rng: &mut R,
) -> Result<PredictiveDistribution> {
    check_theta(theta)?;
    if n_shots == 0 || n_repeats == 0 {
        return Err(validation("n_shots and n_repeats must be positive"));
    }
    let exact = sgm_predict(params, theta, cache)?;
    Ok(resample(&exact, n_shots, n_repeats, rng))
}

pub(crate) fn resample<R: Rng + ?Sized>(
    exact: &Expectations,
    n_shots: u64,
    n_repeats: usize,
    rng: &mut R,
) -> PredictiveDistribution {
    assert!(
        exact.0.iter().all(|v| (-1.0..=1.0).contains(v)),
        "prediction outside [-1, 1]: {exact:?}"
    );
    let samples = (0..n_repeats)
        .map(|_| bernoulli_resample(exact, n_shots, rng))
        .collect();
    distribution(samples, Provenance::SgmResample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::seed::rng_for;
    use std::f64::consts::PI;

    fn cache_with(thetas: &[f64]) -> WhiteboxCache {
        let cfg = DeviceConfig {
            trotter_steps: 500,
            ..DeviceConfig::default()
        };
        let mut cache = WhiteboxCache::new(&cfg).unwrap();
        cache.fill(thetas.iter().copied()).unwrap();
        cache
    }

    fn records(thetas: &[f64], cache: &WhiteboxCache) -> Vec<ExperimentRecord> {
        // Labels from a different network so the loss is nonzero.
        let teacher = BlackboxParams::init(99);
        thetas
            .iter()
            .map(|&theta| ExperimentRecord {
                theta,
                n_shots: 1000,
                exps: sgm_predict(&teacher, theta, cache).unwrap(),
            })
            .collect()
    }

    #[test]
    fn predictions_are_bounded() {
        let thetas: Vec<f64> = (0..=50).map(|i| 2.0 * PI * i as f64 / 50.0).collect();
        let cache = cache_with(&thetas);
        for seed in 0..5 {
            let params = BlackboxParams::init(seed);
            for &t in &thetas {
                let y = sgm_predict(&params, t, &cache).unwrap();
                assert!(y.0.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let thetas = [0.3, 1.4, 2.9, 5.0, 6.1];
        let cache = cache_with(&thetas);
        let data = records(&thetas, &cache);
        let batch: Vec<&ExperimentRecord> = data.iter().collect();
        let params = BlackboxParams::init(3);
        let (_, grad) = sgm_loss(&params, &batch, &cache).unwrap();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        for i in 0..nn::NUM_PARAMS {
            let mut p = params.clone();
            p.as_mut_slice()[i] += h;
            let up = sgm_loss(&p, &batch, &cache).unwrap().0;
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = sgm_loss(&p, &batch, &cache).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            max_err = max_err.max((fd - grad[i]).abs() / (1e-6 + fd.abs().max(grad[i].abs())));
        }
        assert!(max_err < 1e-4, "{max_err}");
    }

    #[test]
    fn missing_cache_entry_is_an_error() {
        let cache = cache_with(&[1.0]);
        assert!(sgm_predict(&BlackboxParams::init(0), 2.0, &cache).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let thetas: Vec<f64> = (0..40).map(|i| 0.15 * i as f64).collect();
        let mut cache = cache_with(&[]);
        let cache_ro = cache_with(&thetas);
        let data = records(&thetas, &cache_ro);
        let hyper = SgmHyper {
            epochs: 60,
            batch_size: 10,
            schedule: WarmupCosineSchedule::new(20, 200),
            ..Default::default()
        };
        let a = sgm_train(&data, &mut cache, &hyper, 5).unwrap();
        let b = sgm_train(&data, &mut cache, &hyper, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 60);
        assert!(a.loss_trace.iter().all(|v| v.is_finite()));
        assert!(a.loss_trace.last().unwrap() < &a.loss_trace[0]);
    }

    #[test]
    fn resampling_edge_cases() {
        let mut exact = Expectations([0.0; NUM_CHANNELS]);
        exact.0[0] = 1.0;
        exact.0[1] = -1.0;
        let n = 1000;
        let dist = resample(&exact, n, 10_000, &mut rng_for(1, "t", 0));
        let var = dist.variance();
        assert_eq!(var.0[0], 0.0);
        assert_eq!(var.0[1], 0.0);
        let want = 1.0 / n as f64;
        assert!((var.0[2] - want).abs() / want < 0.1, "{}", var.0[2]);
        let mean = dist.mean();
        let se = (want / 10_000.0).sqrt();
        assert!(mean.0[2].abs() < 5.0 * se);
        assert_eq!(dist.provenance, Provenance::SgmResample);
    }
}
