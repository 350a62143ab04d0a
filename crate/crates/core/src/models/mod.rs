//! Graybox predictive models.
//!
//! Both models share the same structure: an ideal whitebox propagator
//! `U₀(θ)` maps each cardinal input state to `U₀ρ₀U₀†`, and the blackbox
//! network supplies distorted observables `W_O(θ)`, giving predictions
//! `Tr[W_O U₀ρ₀U₀†]`. The SGM keeps a point estimate of the network
//! weights; the PGM keeps a mean-field Gaussian posterior over them.

pub mod pgm;
pub mod sgm;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{ControlParams, Device, DeviceConfig};
use crate::distribution::{binomial, shots_to_expectation, PredictiveDistribution, Provenance};
use crate::error::{validation, Result};
use crate::nn::{self, BlackboxParams, DensityEntries, HeadOutput, BRANCHES};
use crate::noise::PsdSpec;
use crate::quantum::{CardinalState, Channel, Expectations, Operator2, NUM_CHANNELS};

/// Ideal propagator at one control and the six evolved input states.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteboxEntry {
    pub unitary: Operator2,
    pub post_states: [DensityEntries; 6],
}

impl WhiteboxEntry {
    pub fn from_unitary(unitary: Operator2) -> Self {
        let post_states = CardinalState::ALL
            .map(|s| DensityEntries::from_operator(&unitary.conjugate(&s.density())));
        WhiteboxEntry {
            unitary,
            post_states,
        }
    }
}

/// Noiseless Trotterized simulation of the device.
pub struct Whitebox {
    device: Device,
}

impl Whitebox {
    pub fn new(config: &DeviceConfig) -> Result<Self> {
        Ok(Whitebox {
            device: Device::new(&config.noiseless(), &PsdSpec::zero())?,
        })
    }

    pub fn unitary(&self, theta: f64) -> Result<Operator2> {
        self.device.evolve(&ControlParams::new(theta)?, None)
    }

    pub fn entry(&self, theta: f64) -> Result<WhiteboxEntry> {
        Ok(WhiteboxEntry::from_unitary(self.unitary(theta)?))
    }
}

/// Whitebox entry for one control under `config`'s resolution.
pub fn whitebox_ideal(theta: f64, config: &DeviceConfig) -> Result<WhiteboxEntry> {
    Whitebox::new(config)?.entry(theta)
}

/// Whitebox entries keyed by the exact bit pattern of θ.
pub struct WhiteboxCache {
    whitebox: Whitebox,
    entries: HashMap<u64, WhiteboxEntry>,
}

impl WhiteboxCache {
    pub fn new(config: &DeviceConfig) -> Result<Self> {
        Ok(WhiteboxCache {
            whitebox: Whitebox::new(config)?,
            entries: HashMap::new(),
        })
    }

    pub fn whitebox(&self) -> &Whitebox {
        &self.whitebox
    }

    /// Compute and store entries for every θ not yet cached.
    pub fn fill(&mut self, thetas: impl IntoIterator<Item = f64>) -> Result<()> {
        for theta in thetas {
            self.get_or_insert(theta)?;
        }
        Ok(())
    }

    pub fn get_or_insert(&mut self, theta: f64) -> Result<&WhiteboxEntry> {
        let key = theta.to_bits();
        if !self.entries.contains_key(&key) {
            let entry = self.whitebox.entry(theta)?;
            self.entries.insert(key, entry);
        }
        Ok(&self.entries[&key])
    }

    pub fn get(&self, theta: f64) -> Result<&WhiteboxEntry> {
        self.entries
            .get(&theta.to_bits())
            .ok_or_else(|| validation(format!("no whitebox entry cached for theta = {theta}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Graybox prediction from head outputs and whitebox states.
pub fn predict_from_heads(heads: &[HeadOutput; BRANCHES], entry: &WhiteboxEntry) -> Expectations {
    Expectations::from_fn(|ch| {
        heads[ch.observable.index()]
            .expectation(&entry.post_states[ch.state.index()])
            .clamp(-1.0, 1.0)
    })
}

/// `∂L/∂heads` given `∂L/∂ŷ` for all 18 channels.
pub fn head_gradients(
    heads: &[HeadOutput; BRANCHES],
    entry: &WhiteboxEntry,
    d_pred: &[f64; NUM_CHANNELS],
) -> [[f64; nn::HEAD_OUTPUTS]; BRANCHES] {
    let mut out = [[0.0; nn::HEAD_OUTPUTS]; BRANCHES];
    for ch in Channel::all() {
        let d = d_pred[ch.index()];
        if d == 0.0 {
            continue;
        }
        let b = ch.observable.index();
        let g = heads[b].expectation_grad(&entry.post_states[ch.state.index()]);
        for (o, v) in out[b].iter_mut().zip(g) {
            *o += d * v;
        }
    }
    out
}

/// Graybox 18-vector for blackbox weights at `theta`.
pub fn graybox_predict(params: &BlackboxParams, theta: f64, entry: &WhiteboxEntry) -> Expectations {
    predict_from_heads(&nn::forward(params, theta).heads, entry)
}

/// Finite-shot vectors drawn by treating `exact` as the true expectations.
pub fn bernoulli_resample<R: Rng + ?Sized>(
    exact: &Expectations,
    n_shots: u64,
    rng: &mut R,
) -> Expectations {
    Expectations::from_fn(|ch| {
        let p = (1.0 + exact.0[ch.index()]) / 2.0;
        shots_to_expectation(binomial(rng, n_shots, p), n_shots)
    })
}

/// Blackbox weights whose observables are exactly `(σ_x, σ_y, σ_z)` at
/// every control, i.e. a model of a distortion-free device.
pub fn ideal_blackbox() -> BlackboxParams {
    // Pre-activations p give head values clamp(p/6 + 1/2) scaled to
    // (θ, α, β) ∈ [0, 2π] and λ ∈ [−1, 1].
    BlackboxParams::constant_heads([
        [-2.25, -3.0, 0.0, 3.0, -3.0],
        [-2.25, -3.0, -1.5, 3.0, -3.0],
        [-3.0, -3.0, -3.0, 3.0, -3.0],
    ])
}

/// Which model a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sgm,
    Pgm,
}

/// Flat parameter checkpoint with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub architecture: String,
    pub model: ModelKind,
    pub parameters: Vec<f64>,
    pub metadata: serde_json::Value,
}

/// Architecture descriptor written into every checkpoint.
pub const ARCHITECTURE: &str =
    "poly4 -> dense(4,5) relu -> 3x[dense(5,5) relu -> dense(5,5) hard_sigmoid -> U D U^dagger]";

impl Checkpoint {
    pub fn expected_len(model: ModelKind) -> usize {
        match model {
            ModelKind::Sgm => nn::NUM_PARAMS,
            ModelKind::Pgm => 2 * nn::NUM_PARAMS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != ARCHITECTURE {
            return Err(validation(format!("unknown architecture {:?}", self.architecture)));
        }
        let want = Self::expected_len(self.model);
        if self.parameters.len() != want {
            return Err(validation(format!(
                "{:?} checkpoint needs {want} parameters, found {}",
                self.model,
                self.parameters.len()
            )));
        }
        if self.parameters.iter().any(|v| !v.is_finite()) {
            return Err(validation("checkpoint contains non-finite parameters"));
        }
        Ok(())
    }
}

/// Check a control value before it reaches a model.
pub(crate) fn check_theta(theta: f64) -> Result<()> {
    ControlParams::new(theta).map(|_| ())
}

pub(crate) fn distribution(samples: Vec<Expectations>, provenance: Provenance) -> PredictiveDistribution {
    PredictiveDistribution {
        samples,
        provenance,
    }
}
