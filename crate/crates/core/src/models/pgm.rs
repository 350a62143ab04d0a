//! Probabilistic graybox model: a mean-field Gaussian posterior over the
//! blackbox weights, fitted by maximizing a single-sample ELBO.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bernoulli_resample, check_theta, distribution, graybox_predict, head_gradients, predict_from_heads, WhiteboxCache};
use crate::dataset::ExperimentRecord;
use crate::distribution::{binomial_log_pmf, expectation_to_count, LnFactorial, PredictiveDistribution, Provenance};
use crate::error::{validation, Error, Result};
use crate::nn::optim::{adamw_step, AdamWConfig, OptimizerState, WarmupCosineSchedule};
use crate::nn::{self, BlackboxParams, NUM_PARAMS};
use crate::quantum::{Expectations, NUM_CHANNELS};
use crate::seed::{child_seed, rng_for};

/// Lower clamp on predicted `+1` probabilities inside the likelihood.
pub const PROBABILITY_CLAMP: f64 = 1e-6;

/// Prior variance of every blackbox weight.
pub const PRIOR_VARIANCE: f64 = 0.1;

/// Initial posterior standard deviation.
pub const INIT_SCALE: f64 = 0.05;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean and raw-scale vectors of the variational posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    pub raw_scale: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, raw_scale: Vec<f64>) -> Result<Self> {
        if mean.len() != NUM_PARAMS || raw_scale.len() != NUM_PARAMS {
            return Err(validation(format!(
                "variational parameters need {NUM_PARAMS} means and {NUM_PARAMS} raw scales, got {} and {}",
                mean.len(),
                raw_scale.len()
            )));
        }
        Ok(VariationalParams { mean, raw_scale })
    }

    /// Means from the network initializer, scales equal to [`INIT_SCALE`].
    pub fn init(seed: u64) -> Self {
        VariationalParams {
            mean: BlackboxParams::init(seed).into_inner(),
            raw_scale: vec![softplus_inverse(INIT_SCALE); NUM_PARAMS],
        }
    }

    /// The zero-mean isotropic posterior with standard deviation `std`.
    pub fn from_prior(std: f64) -> Self {
        VariationalParams {
            mean: vec![0.0; NUM_PARAMS],
            raw_scale: vec![softplus_inverse(std); NUM_PARAMS],
        }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * NUM_PARAMS {
            return Err(validation(format!(
                "expected {} values, got {}",
                2 * NUM_PARAMS,
                values.len()
            )));
        }
        let mut mean = values;
        let raw_scale = mean.split_off(NUM_PARAMS);
        Self::new(mean, raw_scale)
    }

    /// Means followed by raw scales.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.raw_scale);
        v
    }

    pub fn scales(&self) -> Vec<f64> {
        self.raw_scale.iter().map(|&r| softplus(r)).collect()
    }

    pub fn mean_params(&self) -> BlackboxParams {
        BlackboxParams::new(self.mean.clone()).expect("length checked")
    }

    /// `mean + scale ⊙ eps`.
    pub fn sample_with(&self, eps: &[f64]) -> BlackboxParams {
        let w = self
            .mean
            .iter()
            .zip(&self.raw_scale)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        BlackboxParams::new(w).expect("length checked")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BlackboxParams {
        self.sample_with(&standard_normal(rng))
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..NUM_PARAMS).map(|_| rng.sample(StandardNormal)).collect()
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p²))` for one coordinate.
pub fn gaussian_kl(mu: f64, sigma: f64, prior_std: f64) -> f64 {
    // Written around r − 1 so that r = 1, μ = 0 gives exactly zero.
    let r = sigma / prior_std;
    let x = r - 1.0;
    (x - x.ln_1p()) + 0.5 * x * x + mu * mu / (2.0 * prior_std * prior_std)
}

/// `KL(q ‖ N(0, σ_p² I))` summed over coordinates.
pub fn kl_divergence(vparams: &VariationalParams, prior_std: f64) -> f64 {
    vparams
        .mean
        .iter()
        .zip(&vparams.raw_scale)
        .map(|(&m, &r)| gaussian_kl(m, softplus(r), prior_std))
        .sum()
}

/// Single-sample ELBO estimate and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub log_likelihood: f64,
    /// KL already multiplied by the batch fraction.
    pub kl: f64,
    /// `∂ELBO/∂(mean, raw_scale)`, means first.
    pub grad: Vec<f64>,
}

/// Binomial targets for a batch: `+1` counts per channel.
struct Targets<'a> {
    records: Vec<&'a ExperimentRecord>,
    counts: Vec<[u64; NUM_CHANNELS]>,
    table: LnFactorial,
}

impl<'a> Targets<'a> {
    fn new(records: Vec<&'a ExperimentRecord>) -> Self {
        let n_max = records.iter().map(|r| r.n_shots).max().unwrap_or(0);
        let counts = records
            .iter()
            .map(|r| r.exps.0.map(|v| expectation_to_count(v, r.n_shots)))
            .collect();
        Targets {
            records,
            counts,
            table: LnFactorial::new(n_max),
        }
    }
}

/// Binomial log-likelihood of the targets under weights `w`, with its
/// gradient w.r.t. `w`.
fn log_likelihood(w: &BlackboxParams, targets: &Targets, cache: &WhiteboxCache) -> Result<(f64, Vec<f64>)> {
    let entries = targets
        .records
        .iter()
        .map(|r| cache.get(r.theta))
        .collect::<Result<Vec<_>>>()?;
    let thetas: Vec<f64> = targets.records.iter().map(|r| r.theta).collect();
    let (neg, grad) = nn::gradient(w, &thetas, |i, heads| {
        let pred = predict_from_heads(heads, entries[i]);
        let n = targets.records[i].n_shots;
        let mut d_pred = [0.0; NUM_CHANNELS];
        let mut ll = 0.0;
        for c in 0..NUM_CHANNELS {
            let k = targets.counts[i][c];
            let p = (1.0 + pred.0[c]) / 2.0;
            ll += binomial_log_pmf(&targets.table, k, n, p, PROBABILITY_CLAMP);
            if p > PROBABILITY_CLAMP && p < 1.0 - PROBABILITY_CLAMP {
                let dp = k as f64 / p - (n - k) as f64 / (1.0 - p);
                d_pred[c] = -0.5 * dp;
            }
        }
        (-ll, head_gradients(heads, entries[i], &d_pred))
    })?;
    Ok((-neg, grad.into_iter().map(|g| -g).collect()))
}

fn elbo_with_targets(
    vparams: &VariationalParams,
    targets: &Targets,
    train_size: usize,
    cache: &WhiteboxCache,
    eps: &[f64],
    prior_std: f64,
) -> Result<ElboEstimate> {
    let w = vparams.sample_with(eps);
    let (ll, dw) = log_likelihood(&w, targets, cache).map_err(|e| match e {
        Error::NonFinite { detail, .. } => Error::NonFinite {
            context: "ELBO".into(),
            detail: format!("{detail}; eps = {eps:?}"),
        },
        e => e,
    })?;
    let frac = targets.records.len() as f64 / train_size as f64;
    let prior_var = prior_std * prior_std;
    let mut grad = vec![0.0; 2 * NUM_PARAMS];
    let mut kl = 0.0;
    for i in 0..NUM_PARAMS {
        let (mu, raw) = (vparams.mean[i], vparams.raw_scale[i]);
        let sigma = softplus(raw);
        kl += gaussian_kl(mu, sigma, prior_std);
        grad[i] = dw[i] - frac * mu / prior_var;
        let d_sigma = dw[i] * eps[i] - frac * (sigma / prior_var - 1.0 / sigma);
        grad[NUM_PARAMS + i] = d_sigma * sigmoid(raw);
    }
    let kl = frac * kl;
    let elbo = ll - kl;
    if !elbo.is_finite() {
        return Err(Error::NonFinite {
            context: "ELBO".into(),
            detail: format!("log-likelihood = {ll}, kl = {kl}; weights = {:?}", w.as_slice()),
        });
    }
    Ok(ElboEstimate {
        elbo,
        log_likelihood: ll,
        kl,
        grad,
    })
}

/// ELBO for a batch with the noise `eps` held fixed.
pub fn pgm_elbo_with_noise(
    vparams: &VariationalParams,
    batch: &[&ExperimentRecord],
    train_size: usize,
    cache: &WhiteboxCache,
    eps: &[f64],
    prior_std: f64,
) -> Result<ElboEstimate> {
    if batch.is_empty() {
        return Err(validation("empty batch"));
    }
    if eps.len() != NUM_PARAMS {
        return Err(validation(format!("need {NUM_PARAMS} noise values, got {}", eps.len())));
    }
    if train_size < batch.len() {
        return Err(validation("train_size smaller than the batch"));
    }
    elbo_with_targets(vparams, &Targets::new(batch.to_vec()), train_size, cache, eps, prior_std)
}

/// ELBO for a batch with one reparametrized weight draw from `rng`.
pub fn pgm_elbo<R: Rng + ?Sized>(
    vparams: &VariationalParams,
    batch: &[&ExperimentRecord],
    train_size: usize,
    cache: &WhiteboxCache,
    prior_std: f64,
    rng: &mut R,
) -> Result<ElboEstimate> {
    let eps = standard_normal(rng);
    pgm_elbo_with_noise(vparams, batch, train_size, cache, &eps, prior_std)
}

/// Training hyperparameters. `batch_size = None` trains on the full set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgmHyper {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub schedule: WarmupCosineSchedule,
    pub optimizer: AdamWConfig,
    pub prior_variance: f64,
}

impl Default for PgmHyper {
    fn default() -> Self {
        PgmHyper {
            epochs: 10_000,
            batch_size: None,
            schedule: WarmupCosineSchedule::new(1000, 10_000),
            optimizer: AdamWConfig::default(),
            prior_variance: PRIOR_VARIANCE,
        }
    }
}

impl PgmHyper {
    pub fn prior_std(&self) -> f64 {
        self.prior_variance.sqrt()
    }
}

/// Trained posterior and the summed ELBO of every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PgmTraining {
    pub vparams: VariationalParams,
    pub elbo_trace: Vec<f64>,
}

/// Maximize the ELBO with AdamW on `(mean, raw_scale)`.
///
/// Each optimizer step draws its own weight noise from a stream derived
/// from `(seed, step)`. A non-finite ELBO aborts with
/// [`Error::Diverged`] carrying the last finite parameters.
pub fn pgm_train(
    train: &[ExperimentRecord],
    cache: &mut WhiteboxCache,
    hyper: &PgmHyper,
    seed: u64,
) -> Result<PgmTraining> {
    if train.is_empty() {
        return Err(validation("training set is empty"));
    }
    if hyper.epochs == 0 || hyper.batch_size == Some(0) {
        return Err(validation("epochs and batch_size must be positive"));
    }
    if !(hyper.prior_variance > 0.0) {
        return Err(validation("prior variance must be positive"));
    }
    cache.fill(train.iter().map(|r| r.theta))?;
    let cache = &*cache;
    let prior_std = hyper.prior_std();
    let batch_size = hyper.batch_size.unwrap_or(train.len()).min(train.len());
    let batches: Vec<Targets> = train
        .chunks(batch_size)
        .map(|c| Targets::new(c.iter().collect()))
        .collect();

    let mut vparams = VariationalParams::init(child_seed(seed, "pgm-init", 0));
    let mut flat = vparams.to_flat();
    let mut state = OptimizerState::new(2 * NUM_PARAMS, hyper.schedule, hyper.optimizer);
    let mut elbo_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        for targets in &batches {
            let eps = standard_normal(&mut rng_for(seed, "pgm-eps", state.step));
            let est = match elbo_with_targets(&vparams, targets, train.len(), cache, &eps, prior_std) {
                Ok(est) => est,
                Err(Error::NonFinite { detail, .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        detail,
                        last_good: flat,
                    })
                }
                Err(e) => return Err(e),
            };
            let neg: Vec<f64> = est.grad.iter().map(|g| -g).collect();
            adamw_step(&mut state, &mut flat, &neg);
            vparams = VariationalParams::from_flat(flat.clone())?;
            total += est.elbo;
        }
        elbo_trace.push(total);
    }
    Ok(PgmTraining { vparams, elbo_trace })
}

/// Prediction with every weight at its posterior mean.
pub fn pgm_mean_predict(vparams: &VariationalParams, theta: f64, cache: &WhiteboxCache) -> Result<Expectations> {
    Ok(graybox_predict(&vparams.mean_params(), theta, cache.get(theta)?))
}

/// Finite-shot vectors from the posterior predictive: one weight draw and
/// one binomial vector per sample. Samples run in parallel on streams
/// derived from a seed taken from `rng`.
pub fn pgm_posterior_predictive<R: Rng + ?Sized>(
    vparams: &VariationalParams,
    theta: f64,
    cache: &WhiteboxCache,
    n_shots: u64,
    n_weight_samples: usize,
    rng: &mut R,
) -> Result<PredictiveDistribution> {
    check_theta(theta)?;
    if n_shots == 0 || n_weight_samples == 0 {
        return Err(validation("n_shots and n_weight_samples must be positive"));
    }
    let entry = cache.get(theta)?;
    let base: u64 = rng.random();
    let samples = (0..n_weight_samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng_for(base, "pgm-predictive", j as u64);
            let w = vparams.sample(&mut rng);
            bernoulli_resample(&graybox_predict(&w, theta, entry), n_shots, &mut rng)
        })
        .collect();
    Ok(distribution(samples, Provenance::PgmPosterior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::models::sgm::sgm_uncertainty;

    fn cache_with(thetas: &[f64]) -> WhiteboxCache {
        let cfg = DeviceConfig {
            trotter_steps: 500,
            ..DeviceConfig::default()
        };
        let mut cache = WhiteboxCache::new(&cfg).unwrap();
        cache.fill(thetas.iter().copied()).unwrap();
        cache
    }

    fn records(thetas: &[f64], cache: &WhiteboxCache, seed: u64) -> Vec<ExperimentRecord> {
        let teacher = BlackboxParams::init(99);
        let mut rng = rng_for(seed, "records", 0);
        thetas
            .iter()
            .map(|&theta| {
                let exact = graybox_predict(&teacher, theta, cache.get(theta).unwrap());
                ExperimentRecord {
                    theta,
                    n_shots: 1000,
                    exps: bernoulli_resample(&exact, 1000, &mut rng),
                }
            })
            .collect()
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-4, 0.05, 0.1f64.sqrt(), 1.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() <= 1e-15 * y.max(1.0));
        }
    }

    #[test]
    fn layout_has_410_values() {
        let v = VariationalParams::init(0);
        assert_eq!(v.to_flat().len(), 410);
        assert!(v.scales().iter().all(|&s| s > 0.0 && (s - INIT_SCALE).abs() < 1e-15));
        assert_eq!(VariationalParams::from_flat(v.to_flat()).unwrap(), v);
        assert!(VariationalParams::from_flat(vec![0.0; 409]).is_err());
    }

    #[test]
    fn kl_against_prior_is_zero() {
        let std = PRIOR_VARIANCE.sqrt();
        let q = VariationalParams::from_prior(std);
        let kl = kl_divergence(&q, std);
        assert!((0.0..=1e-25).contains(&kl), "{kl}");
        assert_eq!(gaussian_kl(0.0, std, std), 0.0);
    }

    #[test]
    fn kl_is_non_negative() {
        for mu in [-1.0, -0.01, 0.0, 0.3] {
            for sigma in [1e-3, 0.05, 0.3, 0.31622776601683794, 2.0] {
                assert!(gaussian_kl(mu, sigma, 0.1f64.sqrt()) >= 0.0);
            }
        }
    }

    #[test]
    fn kl_matches_quadrature() {
        // ∫ q ln(q/p) on a fine midpoint grid.
        let (mu, s1, s2) = (0.2, 0.15, 0.1f64.sqrt());
        let normal = |x: f64, m: f64, s: f64| {
            (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let (lo, hi, n) = (mu - 12.0 * s1, mu + 12.0 * s1, 200_000);
        let h = (hi - lo) / n as f64;
        let quad: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                let q = normal(x, mu, s1);
                q * (q / normal(x, 0.0, s2)).ln() * h
            })
            .sum();
        assert!((quad - gaussian_kl(mu, s1, s2)).abs() < 1e-8, "{quad}");
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let thetas = [0.4, 1.2, 2.5, 3.9, 5.7];
        let cache = cache_with(&thetas);
        let data = records(&thetas, &cache, 1);
        let batch: Vec<&ExperimentRecord> = data.iter().collect();
        let mut v = VariationalParams::init(7);
        // Move scales off their common initial value.
        for (i, r) in v.raw_scale.iter_mut().enumerate() {
            *r += 0.3 * ((i % 7) as f64 - 3.0);
        }
        let eps = standard_normal(&mut rng_for(2, "eps", 0));
        let std = PRIOR_VARIANCE.sqrt();
        let est = pgm_elbo_with_noise(&v, &batch, 20, &cache, &eps, std).unwrap();
        let f = |flat: &[f64]| {
            let v = VariationalParams::from_flat(flat.to_vec()).unwrap();
            pgm_elbo_with_noise(&v, &batch, 20, &cache, &eps, std).unwrap().elbo
        };
        let base = v.to_flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(est.grad[i].abs()).max(1e-3);
            worst = worst.max((fd - est.grad[i]).abs() / scale);
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn frozen_noise_is_deterministic() {
        let thetas = [0.4, 1.2];
        let cache = cache_with(&thetas);
        let data = records(&thetas, &cache, 1);
        let batch: Vec<&ExperimentRecord> = data.iter().collect();
        let v = VariationalParams::init(1);
        let a = pgm_elbo(&v, &batch, 2, &cache, 0.3, &mut rng_for(5, "e", 0)).unwrap();
        let b = pgm_elbo(&v, &batch, 2, &cache, 0.3, &mut rng_for(5, "e", 0)).unwrap();
        assert_eq!(a, b);
        assert!(pgm_elbo(&v, &[], 2, &cache, 0.3, &mut rng_for(5, "e", 0)).is_err());
    }

    #[test]
    fn training_improves_elbo_and_is_reproducible() {
        let thetas: Vec<f64> = (0..30).map(|i| 0.2 * i as f64).collect();
        let data = records(&thetas, &cache_with(&thetas), 3);
        let mut cache = cache_with(&[]);
        let hyper = PgmHyper {
            epochs: 150,
            schedule: WarmupCosineSchedule::new(20, 150),
            ..Default::default()
        };
        let a = pgm_train(&data, &mut cache, &hyper, 11).unwrap();
        let b = pgm_train(&data, &mut cache, &hyper, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.elbo_trace.iter().all(|v| v.is_finite()));
        let head: f64 = a.elbo_trace[..10].iter().sum();
        let tail: f64 = a.elbo_trace[140..].iter().sum();
        assert!(tail > head, "{head} -> {tail}");
    }

    #[test]
    fn degenerate_posterior_matches_mean_weight_resampling() {
        let theta = 2.2;
        let cache = cache_with(&[theta]);
        let mut v = VariationalParams::init(4);
        v.raw_scale = vec![softplus_inverse(1e-12); NUM_PARAMS];
        let n = 1000;
        let pgm = pgm_posterior_predictive(&v, theta, &cache, n, 4000, &mut rng_for(1, "p", 0)).unwrap();
        let sgm = sgm_uncertainty(&v.mean_params(), theta, &cache, n, 4000, &mut rng_for(2, "s", 0)).unwrap();
        let (mp, ms) = (pgm.mean(), sgm.mean());
        let (vp, vs) = (pgm.variance(), sgm.variance());
        for c in 0..NUM_CHANNELS {
            let se = ((vp.0[c] + vs.0[c]) / 4000.0).sqrt().max(1e-12);
            assert!((mp.0[c] - ms.0[c]).abs() < 5.0 * se);
            if vs.0[c] > 1e-4 {
                assert!((vp.0[c] / vs.0[c] - 1.0).abs() < 0.15);
            }
        }
        assert!(pgm.samples.iter().all(|s| s.0.iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(pgm.provenance, Provenance::PgmPosterior);
    }
}
