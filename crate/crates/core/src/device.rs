//! The simulated device: Gaussian control pulse, rotating-frame Hamiltonian
//! with colored noise and detuning, Trotterized evolution, trajectory
//! ensembles and finite-shot resampling.
//!
//! Units: times in ns, frequencies in GHz. The pulse envelope is written in
//! units of the sampling period `dt`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{PredictiveDistribution, Provenance, ShotSampler};
use crate::error::{validation, Result};
use crate::noise::{NoiseSynthesizer, NoiseTrace, PsdSpec};
use crate::quantum::{expm_pauli, Expectations, Operator2, NUM_CHANNELS};
use crate::seed::rng_for;

/// Control parameters of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    /// Pulse area control in `[0, 2π]`.
    pub theta: f64,
    /// Carrier phase.
    pub phi: f64,
}

impl ControlParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=2.0 * PI).contains(&theta) {
            return Err(validation(format!("theta = {theta} outside [0, 2π]")));
        }
        Ok(ControlParams { theta, phi: 0.0 })
    }
}

/// Physical and numerical parameters of the simulated device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// Qubit frequency ω_q.
    pub omega_q: f64,
    /// Drive frequency ω_d.
    pub omega_d: f64,
    /// Drive strength Ω.
    pub drive_strength: f64,
    /// X-axis detuning Δ.
    pub detuning: f64,
    /// Colored-noise strength δ.
    pub noise_strength: f64,
    /// Pulse duration in units of `dt`.
    pub duration_dt: f64,
    /// Sampling period in ns.
    pub dt: f64,
    pub trotter_steps: usize,
    /// Maximum pulse amplitude A_m.
    pub max_amplitude: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            omega_q: 5.0,
            omega_d: 5.0,
            drive_strength: 0.1,
            detuning: 0.001,
            noise_strength: 0.01,
            duration_dt: 320.0,
            dt: 2.0 / 9.0,
            trotter_steps: 10_000,
            max_amplitude: 0.5,
        }
    }
}

impl DeviceConfig {
    /// The same device with noise and detuning switched off.
    pub fn noiseless(&self) -> Self {
        DeviceConfig {
            detuning: 0.0,
            noise_strength: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trotter_steps < 1 {
            return Err(validation("trotter_steps must be at least 1"));
        }
        for (name, v) in [
            ("duration_dt", self.duration_dt),
            ("dt", self.dt),
            ("drive_strength", self.drive_strength),
            ("max_amplitude", self.max_amplitude),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(validation(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("omega_q", self.omega_q),
            ("omega_d", self.omega_d),
            ("detuning", self.detuning),
            ("noise_strength", self.noise_strength),
        ] {
            if !v.is_finite() {
                return Err(validation(format!("{name} must be finite")));
            }
        }
        if self.noise_strength < 0.0 {
            return Err(validation("noise_strength must be non-negative"));
        }
        Ok(())
    }

    /// Total duration T in ns.
    pub fn horizon(&self) -> f64 {
        self.duration_dt * self.dt
    }

    /// Trotter step length in ns.
    pub fn step(&self) -> f64 {
        self.horizon() / self.trotter_steps as f64
    }

    /// Gaussian pulse width σ, in units of `dt`.
    pub fn envelope_sigma(&self) -> f64 {
        (2.0 * PI).sqrt() / (self.max_amplitude * 2.0 * PI * self.drive_strength * self.dt)
    }

    /// Pulse area A, in units of `dt`.
    pub fn envelope_area(&self, theta: f64) -> f64 {
        theta / (2.0 * PI * self.drive_strength * self.dt)
    }

    /// Envelope `h(θ, t)` at time `t` (ns).
    pub fn envelope(&self, theta: f64, t: f64) -> f64 {
        let sigma = self.envelope_sigma();
        let u = t / self.dt - self.duration_dt / 2.0;
        self.envelope_area(theta) / ((2.0 * PI).sqrt() * sigma)
            * (-u * u / (2.0 * sigma * sigma)).exp()
    }

    /// Noisy control signal `h(θ,t)·cos(2π ω_d t + φ) + δ·n(t)`.
    pub fn signal(&self, params: &ControlParams, t: f64, noise_value: f64) -> f64 {
        self.envelope(params.theta, t) * (2.0 * PI * self.omega_d * t + params.phi).cos()
            + self.noise_strength * noise_value
    }
}

/// [`DeviceConfig::envelope`] for the default device.
pub fn envelope(theta: f64, t: f64) -> f64 {
    DeviceConfig::default().envelope(theta, t)
}

/// Per-step quantities that do not depend on the control or the noise.
#[derive(Clone, Debug)]
struct TimeGrid {
    /// Envelope at θ = 1 (the envelope is linear in θ).
    shape: Vec<f64>,
    carrier_cos: Vec<f64>,
    carrier_sin: Vec<f64>,
    frame_cos: Vec<f64>,
    frame_sin: Vec<f64>,
}

impl TimeGrid {
    fn new(config: &DeviceConfig) -> Self {
        let steps = config.trotter_steps;
        let dt = config.step();
        let mut grid = TimeGrid {
            shape: Vec::with_capacity(steps),
            carrier_cos: Vec::with_capacity(steps),
            carrier_sin: Vec::with_capacity(steps),
            frame_cos: Vec::with_capacity(steps),
            frame_sin: Vec::with_capacity(steps),
        };
        for j in 0..steps {
            let t = (j as f64 + 0.5) * dt;
            grid.shape.push(config.envelope(1.0, t));
            let (s, c) = (2.0 * PI * config.omega_d * t).sin_cos();
            grid.carrier_cos.push(c);
            grid.carrier_sin.push(s);
            let (s, c) = (2.0 * PI * config.omega_q * t).sin_cos();
            grid.frame_cos.push(c);
            grid.frame_sin.push(s);
        }
        grid
    }
}

/// A device ready to simulate: configuration plus precomputed time grid and
/// noise basis.
pub struct Device {
    config: DeviceConfig,
    grid: TimeGrid,
    synth: Option<NoiseSynthesizer>,
}

/// Trajectories synthesized per noise batch.
const NOISE_BATCH: usize = 100;

impl Device {
    pub fn new(config: &DeviceConfig, psd: &PsdSpec) -> Result<Self> {
        config.validate()?;
        let synth = if config.noise_strength != 0.0 {
            Some(NoiseSynthesizer::new(
                psd,
                config.trotter_steps.max(2),
                config.horizon(),
            )?)
        } else {
            None
        };
        Ok(Device {
            config: config.clone(),
            grid: TimeGrid::new(config),
            synth,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn is_noisy(&self) -> bool {
        self.synth.is_some()
    }

    /// Propagator for one noise realization (`None` means no noise).
    pub fn evolve(&self, params: &ControlParams, noise: Option<&NoiseTrace>) -> Result<Operator2> {
        let steps = self.config.trotter_steps;
        if let Some(trace) = noise {
            if trace.len() != steps {
                return Err(validation(format!(
                    "noise trace has {} samples, expected {steps}",
                    trace.len()
                )));
            }
        }
        let g = &self.grid;
        let (sphi, cphi) = params.phi.sin_cos();
        let drive = 2.0 * PI * self.config.drive_strength;
        let delta = self.config.noise_strength;
        let detuning = self.config.detuning;
        let dt = self.config.step();
        let mut u = Operator2::identity();
        for j in 0..steps {
            let carrier = g.carrier_cos[j] * cphi - g.carrier_sin[j] * sphi;
            let mut s = params.theta * g.shape[j] * carrier;
            if let Some(trace) = noise {
                s += delta * trace.samples[j];
            }
            let k = drive * s;
            let a = [k * g.frame_cos[j] + detuning, -k * g.frame_sin[j], 0.0];
            u = expm_pauli(0.0, a, dt) * u;
        }
        Ok(u)
    }

    /// Exact (intermediate) expectations for each of `m` noise trajectories.
    pub fn intermediate_ensemble(
        &self,
        params: &ControlParams,
        m: usize,
        seed: u64,
    ) -> Result<IntermediateEnsemble> {
        if m == 0 {
            return Err(validation("trajectory count must be at least 1"));
        }
        let values = match &self.synth {
            None => {
                let exps = clamp_unit(Expectations::of_unitary(&self.evolve(params, None)?));
                vec![exps; m]
            }
            Some(synth) => {
                let mut values = Vec::with_capacity(m);
                for start in (0..m).step_by(NOISE_BATCH) {
                    let end = (start + NOISE_BATCH).min(m);
                    let mut rngs: Vec<_> = (start..end)
                        .map(|i| rng_for(seed, "trajectory", i as u64))
                        .collect();
                    for trace in synth.sample_batch(&mut rngs) {
                        let u = self.evolve(params, Some(&trace))?;
                        values.push(clamp_unit(Expectations::of_unitary(&u)));
                    }
                }
                values
            }
        };
        Ok(IntermediateEnsemble {
            control: *params,
            values,
        })
    }
}

fn clamp_unit(mut e: Expectations) -> Expectations {
    // Rounding can leave |⟨P⟩| a few ulps above 1.
    e.0.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    e
}

/// Propagator of one trajectory for a standalone configuration.
pub fn evolve_trajectory(
    params: &ControlParams,
    config: &DeviceConfig,
    noise: &NoiseTrace,
) -> Result<Operator2> {
    config.validate()?;
    let device = Device {
        config: config.clone(),
        grid: TimeGrid::new(config),
        synth: None,
    };
    device.evolve(params, Some(noise))
}

/// Intermediate expectation values of `M` noise trajectories at one control.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateEnsemble {
    pub control: ControlParams,
    /// One 18-vector per trajectory.
    pub values: Vec<Expectations>,
}

impl IntermediateEnsemble {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.values.iter().map(|v| v.0[index]).collect()
    }

    pub fn mean(&self) -> Expectations {
        let n = self.values.len() as f64;
        Expectations::from_fn(|ch| self.values.iter().map(|v| v.0[ch.index()]).sum::<f64>() / n)
    }
}

/// Resample an ensemble into `n_repeats` finite-shot 18-vectors.
pub fn finite_shot_sample<R: Rng + ?Sized>(
    ensemble: &IntermediateEnsemble,
    n_shots: u64,
    n_repeats: usize,
    rng: &mut R,
) -> Result<PredictiveDistribution> {
    if n_shots == 0 {
        return Err(validation("n_shots must be at least 1"));
    }
    if ensemble.is_empty() {
        return Err(validation("cannot resample an empty ensemble"));
    }
    let samplers = (0..NUM_CHANNELS)
        .map(|c| ShotSampler::new(&ensemble.channel(c)))
        .collect::<Result<Vec<_>>>()?;
    let samples = (0..n_repeats)
        .map(|_| {
            let mut out = [0.0; NUM_CHANNELS];
            for (o, s) in out.iter_mut().zip(&samplers) {
                *o = s.sample(n_shots, rng);
            }
            Expectations(out)
        })
        .collect();
    Ok(PredictiveDistribution {
        samples,
        provenance: Provenance::Device,
    })
}
