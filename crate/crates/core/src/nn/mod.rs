//! The blackbox network and its reverse-mode gradient.
//!
//! Layout (205 parameters):
//!
//! ```text
//! θ ─ f(θ/2π) = (x, x², x³, x⁴) ─ shared 4→5 ReLU ─┬─ Pauli-X 5→5 ReLU ─ head 5→5 ─ hard sigmoid
//!                                                   ├─ Pauli-Y 5→5 ReLU ─ head 5→5 ─ hard sigmoid
//!                                                   └─ Pauli-Z 5→5 ReLU ─ head 5→5 ─ hard sigmoid
//! ```
//!
//! Each head emits `(θ_w, α, β, λ₁, λ₂)` with angles in `[0, 2π]` and
//! eigenvalues in `[−1, 1]`, defining `W = U(θ_w, α, β) diag(λ₁, λ₂) U†`.
//! The flat parameter vector stores, in order: the shared layer, the three
//! Pauli layers, then the three heads; each layer as a row-major
//! `out × in` weight matrix followed by its bias.

pub mod optim;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::quantum::{Operator2, C64};
use crate::seed::rng_for;

pub use optim::{adamw_step, AdamWConfig, OptimizerState, WarmupCosineSchedule};

pub const FEATURES: usize = 4;
pub const HIDDEN: usize = 5;
pub const HEAD_OUTPUTS: usize = 5;
pub const BRANCHES: usize = 3;

const SHARED_LEN: usize = HIDDEN * FEATURES + HIDDEN;
const PAULI_LEN: usize = HIDDEN * HIDDEN + HIDDEN;
const HEAD_LEN: usize = HEAD_OUTPUTS * HIDDEN + HEAD_OUTPUTS;

/// Trainable parameters of the blackbox.
pub const NUM_PARAMS: usize = SHARED_LEN + BRANCHES * (PAULI_LEN + HEAD_LEN);

fn pauli_offset(branch: usize) -> usize {
    SHARED_LEN + branch * PAULI_LEN
}

fn head_offset(branch: usize) -> usize {
    SHARED_LEN + BRANCHES * PAULI_LEN + branch * HEAD_LEN
}

/// `(x, x², x³, x⁴)` with `x = θ/2π`.
pub fn feature_map(theta: f64) -> [f64; FEATURES] {
    let x = theta / (2.0 * PI);
    [x, x * x, x * x * x, x * x * x * x]
}

/// `max(0, min(1, x/6 + 1/2))`.
pub fn hard_sigmoid(x: f64) -> f64 {
    (x / 6.0 + 0.5).clamp(0.0, 1.0)
}

/// Subgradient of [`hard_sigmoid`]: `1/6` on `[−3, 3]`, zero outside.
pub fn hard_sigmoid_grad(x: f64) -> f64 {
    if (-3.0..=3.0).contains(&x) {
        1.0 / 6.0
    } else {
        0.0
    }
}

/// Flat blackbox weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlackboxParams(Vec<f64>);

impl BlackboxParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_PARAMS {
            return Err(validation(format!(
                "blackbox needs {NUM_PARAMS} parameters, got {}",
                values.len()
            )));
        }
        Ok(BlackboxParams(values))
    }

    /// Uniform `±√(1/fan_in)` initialization for weights and biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_for(seed, "blackbox-init", 0);
        let mut values = Vec::with_capacity(NUM_PARAMS);
        let mut layer = |fan_in: usize, fan_out: usize, values: &mut Vec<f64>| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                values.push(rng.random_range(-bound..bound));
            }
        };
        layer(FEATURES, HIDDEN, &mut values);
        for _ in 0..BRANCHES {
            layer(HIDDEN, HIDDEN, &mut values);
        }
        for _ in 0..BRANCHES {
            layer(HIDDEN, HEAD_OUTPUTS, &mut values);
        }
        debug_assert_eq!(values.len(), NUM_PARAMS);
        BlackboxParams(values)
    }

    /// All weights zero except the head biases, so every control maps to
    /// the same head pre-activations `biases[b]`.
    pub fn constant_heads(biases: [[f64; HEAD_OUTPUTS]; BRANCHES]) -> Self {
        let mut p = vec![0.0; NUM_PARAMS];
        for (b, bias) in biases.iter().enumerate() {
            let start = head_offset(b) + HEAD_OUTPUTS * HIDDEN;
            p[start..start + HEAD_OUTPUTS].copy_from_slice(bias);
        }
        BlackboxParams(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Constrained head outputs for one Pauli branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutput {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl HeadOutput {
    fn from_unit(u: [f64; HEAD_OUTPUTS]) -> Self {
        HeadOutput {
            theta: 2.0 * PI * u[0],
            alpha: 2.0 * PI * u[1],
            beta: 2.0 * PI * u[2],
            lambda1: 2.0 * u[3] - 1.0,
            lambda2: 2.0 * u[4] - 1.0,
        }
    }

    /// `U(θ, α, β)`.
    pub fn rotation(&self) -> Operator2 {
        let (s, c) = self.theta.sin_cos();
        let ea = Complex64::from_polar(1.0, self.alpha);
        let eb = Complex64::from_polar(1.0, self.beta);
        Operator2::new(ea * c, eb * s, -eb.conj() * s, ea.conj() * c)
    }

    /// `W = U diag(λ₁, λ₂) U†`.
    pub fn observable(&self) -> Operator2 {
        let u = self.rotation();
        u * Operator2::diag(self.lambda1, self.lambda2) * u.dagger()
    }

    /// `Tr[W ρ]` for a density matrix given by its upper triangle.
    pub fn expectation(&self, rho: &DensityEntries) -> f64 {
        self.lambda2 + (self.lambda1 - self.lambda2) * self.overlap(rho)
    }

    /// `⟨u₀|ρ|u₀⟩` with `u₀` the first column of `U`.
    fn overlap(&self, rho: &DensityEntries) -> f64 {
        let (s2, c2) = (2.0 * self.theta).sin_cos();
        let (sg, cg) = (self.alpha + self.beta).sin_cos();
        let cos_sq = 0.5 * (1.0 + c2);
        let coherence = rho.coherence.re * cg + rho.coherence.im * sg;
        cos_sq * rho.population0 + (1.0 - cos_sq) * (1.0 - rho.population0) - s2 * coherence
    }

    /// Gradient of [`Self::expectation`] w.r.t. `(θ, α, β, λ₁, λ₂)`.
    pub fn expectation_grad(&self, rho: &DensityEntries) -> [f64; HEAD_OUTPUTS] {
        let (s2, c2) = (2.0 * self.theta).sin_cos();
        let (sg, cg) = (self.alpha + self.beta).sin_cos();
        let (a, b) = (rho.coherence.re, rho.coherence.im);
        let coherence = a * cg + b * sg;
        let q = self.overlap(rho);
        let gap = self.lambda1 - self.lambda2;
        let dq_dtheta = s2 * (1.0 - 2.0 * rho.population0) - 2.0 * c2 * coherence;
        let dq_dgamma = -s2 * (-a * sg + b * cg);
        [
            gap * dq_dtheta,
            gap * dq_dgamma,
            gap * dq_dgamma,
            q,
            1.0 - q,
        ]
    }

    /// Gradient of [`Self::expectation`] w.r.t. the density entries
    /// `(ρ₀₀, Re ρ₀₁, Im ρ₀₁)`, with `ρ₁₁ = 1 − ρ₀₀` eliminated.
    pub fn density_grad(&self) -> [f64; 3] {
        let (s2, c2) = (2.0 * self.theta).sin_cos();
        let (sg, cg) = (self.alpha + self.beta).sin_cos();
        let gap = self.lambda1 - self.lambda2;
        [gap * c2, -gap * s2 * cg, -gap * s2 * sg]
    }
}

/// The independent entries of a single-qubit density matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityEntries {
    pub population0: f64,
    pub coherence: C64,
}

impl DensityEntries {
    pub fn from_operator(rho: &Operator2) -> Self {
        DensityEntries {
            population0: rho.0[0][0].re,
            coherence: rho.0[0][1],
        }
    }
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub features: [f64; FEATURES],
    shared_pre: [f64; HIDDEN],
    shared: [f64; HIDDEN],
    pauli_pre: [[f64; HIDDEN]; BRANCHES],
    pauli: [[f64; HIDDEN]; BRANCHES],
    head_pre: [[f64; HEAD_OUTPUTS]; BRANCHES],
    pub heads: [HeadOutput; BRANCHES],
}

fn dense<const IN: usize, const OUT: usize>(layer: &[f64], input: &[f64; IN]) -> [f64; OUT] {
    let (w, b) = layer.split_at(IN * OUT);
    let mut out = [0.0; OUT];
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(IN).zip(b)) {
        *o = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + bias;
    }
    out
}

/// Accumulate the layer's parameter gradient and return the input gradient.
fn dense_backward<const IN: usize, const OUT: usize>(
    layer: &[f64],
    input: &[f64; IN],
    d_out: &[f64; OUT],
    grad: &mut [f64],
) -> [f64; IN] {
    let (w, _) = layer.split_at(IN * OUT);
    let (gw, gb) = grad.split_at_mut(IN * OUT);
    let mut d_in = [0.0; IN];
    for (o, &d) in d_out.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[o] += d;
        let row = &w[o * IN..(o + 1) * IN];
        let grow = &mut gw[o * IN..(o + 1) * IN];
        for i in 0..IN {
            grow[i] += d * input[i];
            d_in[i] += d * row[i];
        }
    }
    d_in
}

fn relu<const N: usize>(x: [f64; N]) -> [f64; N] {
    x.map(|v| v.max(0.0))
}

fn relu_backward<const N: usize>(pre: &[f64; N], d: [f64; N]) -> [f64; N] {
    let mut out = d;
    for (o, p) in out.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

/// Forward pass for one control value.
pub fn forward(params: &BlackboxParams, theta: f64) -> ForwardCache {
    let p = params.as_slice();
    let features = feature_map(theta);
    let shared_pre: [f64; HIDDEN] = dense(&p[..SHARED_LEN], &features);
    let shared = relu(shared_pre);
    let mut pauli_pre = [[0.0; HIDDEN]; BRANCHES];
    let mut pauli = [[0.0; HIDDEN]; BRANCHES];
    let mut head_pre = [[0.0; HEAD_OUTPUTS]; BRANCHES];
    let mut heads = [HeadOutput::from_unit([0.5; HEAD_OUTPUTS]); BRANCHES];
    for b in 0..BRANCHES {
        let off = pauli_offset(b);
        pauli_pre[b] = dense(&p[off..off + PAULI_LEN], &shared);
        pauli[b] = relu(pauli_pre[b]);
        let off = head_offset(b);
        head_pre[b] = dense(&p[off..off + HEAD_LEN], &pauli[b]);
        heads[b] = HeadOutput::from_unit(head_pre[b].map(hard_sigmoid));
    }
    ForwardCache {
        features,
        shared_pre,
        shared,
        pauli_pre,
        pauli,
        head_pre,
        heads,
    }
}

/// The three observables `(W_X, W_Y, W_Z)` at `theta`.
pub fn blackbox_forward(params: &BlackboxParams, theta: f64) -> [Operator2; BRANCHES] {
    forward(params, theta).heads.map(|h| h.observable())
}

/// Back-propagate head-output gradients through one forward pass.
///
/// `d_heads[b]` is `∂L/∂(θ_w, α, β, λ₁, λ₂)` for branch `b`. Parameter
/// gradients are accumulated into `grad`; the return value is `∂L/∂θ`
/// through the feature map.
pub fn backward(
    params: &BlackboxParams,
    cache: &ForwardCache,
    d_heads: &[[f64; HEAD_OUTPUTS]; BRANCHES],
    grad: &mut [f64],
) -> f64 {
    let p = params.as_slice();
    let scale = [2.0 * PI, 2.0 * PI, 2.0 * PI, 2.0, 2.0];
    let mut d_shared = [0.0; HIDDEN];
    for b in 0..BRANCHES {
        let mut d_pre = [0.0; HEAD_OUTPUTS];
        for k in 0..HEAD_OUTPUTS {
            d_pre[k] = d_heads[b][k] * scale[k] * hard_sigmoid_grad(cache.head_pre[b][k]);
        }
        let off = head_offset(b);
        let d_pauli = dense_backward(
            &p[off..off + HEAD_LEN],
            &cache.pauli[b],
            &d_pre,
            &mut grad[off..off + HEAD_LEN],
        );
        let d_pauli_pre = relu_backward(&cache.pauli_pre[b], d_pauli);
        let off = pauli_offset(b);
        let d = dense_backward(
            &p[off..off + PAULI_LEN],
            &cache.shared,
            &d_pauli_pre,
            &mut grad[off..off + PAULI_LEN],
        );
        for (s, v) in d_shared.iter_mut().zip(d) {
            *s += v;
        }
    }
    let d_shared_pre = relu_backward(&cache.shared_pre, d_shared);
    let d_features = dense_backward(
        &p[..SHARED_LEN],
        &cache.features,
        &d_shared_pre,
        &mut grad[..SHARED_LEN],
    );
    let x = cache.features[0];
    let dx = d_features[0] + 2.0 * x * d_features[1] + 3.0 * x * x * d_features[2]
        + 4.0 * x * x * x * d_features[3];
    dx / (2.0 * PI)
}

/// Reverse-mode gradient of `Σ_i ℓ_i` over a batch of control values.
///
/// `head_loss(i, heads)` returns the loss of item `i` and its gradient with
/// respect to the head outputs. Fails if the total loss is not finite, with
/// the offending parameters in the error.
pub fn gradient<F>(params: &BlackboxParams, thetas: &[f64], mut head_loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize, &[HeadOutput; BRANCHES]) -> (f64, [[f64; HEAD_OUTPUTS]; BRANCHES]),
{
    let mut grad = vec![0.0; NUM_PARAMS];
    let mut total = 0.0;
    for (i, &theta) in thetas.iter().enumerate() {
        let cache = forward(params, theta);
        let (loss, d_heads) = head_loss(i, &cache.heads);
        total += loss;
        backward(params, &cache, &d_heads, &mut grad);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "blackbox loss".into(),
            detail: format!("loss = {total}; parameters = {:?}", params.as_slice()),
        });
    }
    Ok((total, grad))
}
