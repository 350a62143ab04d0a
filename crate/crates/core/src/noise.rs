//! Colored control noise.
//!
//! The power spectral density is
//! `S(f) = a/(f + 1) + b·exp(−(f − f₀)²/w)` with defaults `a = 1`, `b = 0.8`,
//! `f₀ = 15`, `w = 10`. Time-domain traces use the spectral representation
//!
//! ```text
//! n(t) = Σ_k √(2 S(f_k) Δf) cos(2π f_k t + φ_k),   f_k = (k + ½)Δf,
//! ```
//!
//! with independent uniform phases `φ_k`. Frequencies are in GHz and times in
//! ns. Samples are taken at the midpoints of the Trotter steps.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Spectral description of the control noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsdSpec {
    /// Coefficient of the `1/(f + 1)` term.
    pub pink_scale: f64,
    /// Height of the Gaussian bump.
    pub peak_amplitude: f64,
    /// Center of the Gaussian bump.
    pub peak_center: f64,
    /// Denominator `w` of the bump exponent `−(f − f₀)²/w`.
    pub peak_width: f64,
    /// Highest synthesized frequency.
    pub f_max: f64,
    /// Number of frequency bins in `[0, f_max]`.
    pub n_freq: usize,
}

impl Default for PsdSpec {
    fn default() -> Self {
        PsdSpec {
            pink_scale: 1.0,
            peak_amplitude: 0.8,
            peak_center: 15.0,
            peak_width: 10.0,
            f_max: 50.0,
            n_freq: 500,
        }
    }
}

impl PsdSpec {
    /// A spectrum with no power.
    pub fn zero() -> Self {
        PsdSpec {
            pink_scale: 0.0,
            peak_amplitude: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_max > 0.0) {
            return Err(validation(format!("f_max must be positive, got {}", self.f_max)));
        }
        if self.n_freq < 2 {
            return Err(validation(format!("n_freq must be at least 2, got {}", self.n_freq)));
        }
        if self.pink_scale < 0.0 || self.peak_amplitude < 0.0 {
            return Err(validation("PSD coefficients must be non-negative"));
        }
        if !(self.peak_width > 0.0) {
            return Err(validation("peak_width must be positive"));
        }
        Ok(())
    }

    /// `S(f)` for `f ≥ 0`.
    pub fn value(&self, f: f64) -> Result<f64> {
        if !(f >= 0.0) {
            return Err(validation(format!("frequency must be non-negative, got {f}")));
        }
        Ok(self.density(f))
    }

    fn density(&self, f: f64) -> f64 {
        let d = f - self.peak_center;
        self.pink_scale / (f + 1.0) + self.peak_amplitude * (-d * d / self.peak_width).exp()
    }

    pub fn bin_width(&self) -> f64 {
        self.f_max / self.n_freq as f64
    }

    /// Bin-center frequencies `(k + ½)Δf`.
    pub fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        let df = self.bin_width();
        (0..self.n_freq).map(move |k| (k as f64 + 0.5) * df)
    }

    /// `Σ_k S(f_k) Δf`, the variance of a synthesized trace at any time.
    pub fn total_power(&self) -> f64 {
        let df = self.bin_width();
        self.frequencies().map(|f| self.density(f) * df).sum()
    }
}

/// [`PsdSpec::value`] for the default spectrum.
pub fn psd_value(f: f64) -> Result<f64> {
    PsdSpec::default().value(f)
}

/// A sampled noise realization, one value per Trotter step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTrace {
    pub samples: Vec<f64>,
    pub dt_step: f64,
}

impl NoiseTrace {
    pub fn zeros(steps: usize, dt_step: f64) -> Self {
        NoiseTrace {
            samples: vec![0.0; steps],
            dt_step,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Precomputed cosine basis for a fixed `(psd, steps, horizon)`.
///
/// Synthesizing a batch of traces is then a single matrix product of the
/// `steps × 2K` basis with the `2K × batch` matrix of phase cosines and sines.
pub struct NoiseSynthesizer {
    psd: PsdSpec,
    steps: usize,
    dt_step: f64,
    basis: Array2<f64>,
}

impl NoiseSynthesizer {
    pub fn new(psd: &PsdSpec, steps: usize, horizon: f64) -> Result<Self> {
        psd.validate()?;
        if steps < 2 {
            return Err(validation(format!("need at least 2 time steps, got {steps}")));
        }
        if !(horizon > 0.0) {
            return Err(validation(format!("horizon must be positive, got {horizon}")));
        }
        let dt_step = horizon / steps as f64;
        let df = psd.bin_width();
        let k = psd.n_freq;
        let amps: Vec<f64> = psd
            .frequencies()
            .map(|f| (2.0 * psd.density(f) * df).sqrt())
            .collect();
        let mut basis = Array2::<f64>::zeros((steps, 2 * k));
        for (j, mut row) in basis.rows_mut().into_iter().enumerate() {
            let t = (j as f64 + 0.5) * dt_step;
            for (i, f) in psd.frequencies().enumerate() {
                let (s, c) = (2.0 * PI * f * t).sin_cos();
                row[2 * i] = amps[i] * c;
                row[2 * i + 1] = -amps[i] * s;
            }
        }
        Ok(NoiseSynthesizer {
            psd: psd.clone(),
            steps,
            dt_step,
            basis,
        })
    }

    pub fn psd(&self) -> &PsdSpec {
        &self.psd
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt_step(&self) -> f64 {
        self.dt_step
    }

    /// One trace per generator. Each generator supplies the `n_freq` phases
    /// of its trace and nothing else.
    pub fn sample_batch<R: Rng>(&self, rngs: &mut [R]) -> Vec<NoiseTrace> {
        let k = self.psd.n_freq;
        let mut coeffs = Array2::<f64>::zeros((2 * k, rngs.len()));
        for (m, rng) in rngs.iter_mut().enumerate() {
            for i in 0..k {
                let phase = rng.random::<f64>() * 2.0 * PI;
                let (s, c) = phase.sin_cos();
                coeffs[[2 * i, m]] = c;
                coeffs[[2 * i + 1, m]] = s;
            }
        }
        let values = self.basis.dot(&coeffs);
        values
            .columns()
            .into_iter()
            .map(|col| NoiseTrace {
                samples: col.to_vec(),
                dt_step: self.dt_step,
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> NoiseTrace {
        self.sample_batch(std::slice::from_mut(rng))
            .pop()
            .expect("one trace")
    }
}

/// Draw one trace of `steps` samples over `horizon`.
pub fn sample_noise_trace<R: Rng>(
    psd: &PsdSpec,
    steps: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<NoiseTrace> {
    Ok(NoiseSynthesizer::new(psd, steps, horizon)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psd_examples() {
        assert_abs_diff_eq!(psd_value(0.0).unwrap(), 1.0 + 0.8 * (-22.5f64).exp(), epsilon = 1e-15);
        assert!((psd_value(0.0).unwrap() - 1.0000000001).abs() < 1e-10);
        assert_abs_diff_eq!(psd_value(15.0).unwrap(), 0.8625, epsilon = 1e-15);
        assert!(psd_value(1e12).unwrap() < 1e-11);
        assert!(psd_value(-0.1).is_err());
        assert!(psd_value(f64::NAN).is_err());
    }

    #[test]
    fn psd_is_non_negative() {
        let psd = PsdSpec::default();
        for i in 0..10_000 {
            assert!(psd.value(i as f64 * 0.01).unwrap() >= 0.0);
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_trace() {
        let mut rng = rng_for(1, "test", 0);
        let trace = sample_noise_trace(&PsdSpec::zero(), 100, 10.0, &mut rng).unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = rng_for(1, "test", 0);
        assert!(sample_noise_trace(&PsdSpec::default(), 1, 10.0, &mut rng).is_err());
        let bad = PsdSpec {
            n_freq: 1,
            ..Default::default()
        };
        assert!(sample_noise_trace(&bad, 10, 10.0, &mut rng).is_err());
    }

    #[test]
    fn seeded_traces_are_bit_identical() {
        let synth = NoiseSynthesizer::new(&PsdSpec::default(), 500, 71.0).unwrap();
        let a = synth.sample(&mut rng_for(9, "noise", 2));
        let b = synth.sample(&mut rng_for(9, "noise", 2));
        let c = synth.sample(&mut rng_for(9, "noise", 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_trace_matches_direct_cosine_sum() {
        let psd = PsdSpec {
            n_freq: 40,
            f_max: 20.0,
            ..Default::default()
        };
        let steps = 64;
        let horizon = 3.0;
        let synth = NoiseSynthesizer::new(&psd, steps, horizon).unwrap();
        let trace = synth.sample(&mut rng_for(4, "noise", 0));

        // Regenerate the same phases and evaluate the cosine sum directly.
        let mut rng = rng_for(4, "noise", 0);
        let phases: Vec<f64> = (0..psd.n_freq)
            .map(|_| rng.random::<f64>() * 2.0 * PI)
            .collect();
        let df = psd.bin_width();
        for (j, v) in trace.samples.iter().enumerate() {
            let t = (j as f64 + 0.5) * horizon / steps as f64;
            let direct: f64 = psd
                .frequencies()
                .zip(&phases)
                .map(|(f, p)| {
                    (2.0 * psd.value(f).unwrap() * df).sqrt() * (2.0 * PI * f * t + p).cos()
                })
                .sum();
            assert_abs_diff_eq!(*v, direct, epsilon = 1e-11);
        }
    }
}
