//! Ensembles of finite-shot 18-vectors and the binomial shot sampler shared
//! by the device and both predictive models.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::quantum::{Expectations, NUM_CHANNELS};

/// Which backend produced a [`PredictiveDistribution`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Device,
    SgmResample,
    PgmPosterior,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Device => "device",
            Provenance::SgmResample => "sgm-resample",
            Provenance::PgmPosterior => "pgm-posterior",
        }
    }
}

/// Sampled finite-shot expectation vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub samples: Vec<Expectations>,
    pub provenance: Provenance,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All samples of one channel.
    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.0[index]).collect()
    }

    pub fn mean(&self) -> Expectations {
        let n = self.samples.len() as f64;
        let mut out = [0.0; NUM_CHANNELS];
        for s in &self.samples {
            for (o, v) in out.iter_mut().zip(s.0.iter()) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Expectations(out)
    }

    pub fn variance(&self) -> Expectations {
        let mean = self.mean();
        let n = self.samples.len() as f64;
        let mut out = [0.0; NUM_CHANNELS];
        for s in &self.samples {
            for ((o, v), m) in out.iter_mut().zip(s.0.iter()).zip(mean.0.iter()) {
                *o += (v - m) * (v - m);
            }
        }
        out.iter_mut().for_each(|o| *o /= n - 1.0);
        Expectations(out)
    }
}

/// Draw `Binomial(n, p)`.
pub(crate) fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Finite-shot estimate from a `+1` count: `2k/n − 1`.
pub fn shots_to_expectation(plus_count: u64, n_shots: u64) -> f64 {
    (2 * plus_count) as f64 / n_shots as f64 - 1.0
}

/// Number of `+1` outcomes that produced a finite-shot value.
pub fn expectation_to_count(value: f64, n_shots: u64) -> u64 {
    let k = (n_shots as f64 * (1.0 + value) / 2.0).round();
    k.clamp(0.0, n_shots as f64) as u64
}

/// `ln k!` for `k = 0..=n_max`.
#[derive(Clone, Debug)]
pub struct LnFactorial(Vec<f64>);

impl LnFactorial {
    pub fn new(n_max: u64) -> Self {
        let mut table = Vec::with_capacity(n_max as usize + 1);
        let mut acc = 0.0;
        table.push(acc);
        for k in 1..=n_max {
            acc += (k as f64).ln();
            table.push(acc);
        }
        LnFactorial(table)
    }

    pub fn n_max(&self) -> u64 {
        self.0.len() as u64 - 1
    }

    pub fn ln_factorial(&self, k: u64) -> f64 {
        self.0[k as usize]
    }

    pub fn ln_choose(&self, n: u64, k: u64) -> f64 {
        self.0[n as usize] - self.0[k as usize] - self.0[(n - k) as usize]
    }
}

/// `ln Binomial(k; n, p)`, with `p` clamped into `[clamp, 1 − clamp]`.
pub fn binomial_log_pmf(table: &LnFactorial, k: u64, n: u64, p: f64, clamp: f64) -> f64 {
    let p = p.clamp(clamp, 1.0 - clamp);
    table.ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// Resampler for one channel's intermediate values.
///
/// A finite-shot draw picks `n` intermediate values with replacement and then
/// one `±1` eigenvalue per pick with `P(+1) = (1 + v)/2`. Picks are allocated
/// to atoms through a multinomial (sequential conditional binomials) and each
/// atom's `+1` count is binomial. Equal atoms are merged first.
#[derive(Clone, Debug)]
pub struct ShotSampler {
    probs: Vec<f64>,
    weights: Vec<f64>,
}

impl ShotSampler {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(validation("cannot resample an empty ensemble"));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(validation(format!("intermediate value {v} outside [-1, 1]")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut probs: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for v in sorted {
            if probs.last().is_some_and(|&p| p == (1.0 + v) / 2.0) {
                *counts.last_mut().expect("non-empty") += 1;
            } else {
                probs.push((1.0 + v) / 2.0);
                counts.push(1);
            }
        }
        let total = values.len() as f64;
        let weights = counts.iter().map(|&c| c as f64 / total).collect();
        Ok(ShotSampler { probs, weights })
    }

    /// One finite-shot `+1` count out of `n_shots`.
    pub fn sample_count<R: Rng + ?Sized>(&self, n_shots: u64, rng: &mut R) -> u64 {
        if self.probs.len() == 1 {
            return binomial(rng, n_shots, self.probs[0]);
        }
        let mut remaining = n_shots;
        let mut mass = 1.0;
        let mut plus = 0;
        let last = self.probs.len() - 1;
        for (i, (&p, &w)) in self.probs.iter().zip(&self.weights).enumerate() {
            if remaining == 0 {
                break;
            }
            let picks = if i == last {
                remaining
            } else {
                binomial(rng, remaining, (w / mass).min(1.0))
            };
            remaining -= picks;
            mass -= w;
            plus += binomial(rng, picks, p);
        }
        plus
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_shots: u64, rng: &mut R) -> f64 {
        shots_to_expectation(self.sample_count(n_shots, rng), n_shots)
    }
}
