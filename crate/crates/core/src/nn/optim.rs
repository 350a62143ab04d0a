//! AdamW with a linear-warmup / cosine-decay learning-rate schedule.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Linear warmup from `init` to `peak`, cosine decay to `end`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupCosineSchedule {
    pub init: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl WarmupCosineSchedule {
    pub fn new(warmup_steps: u64, decay_steps: u64) -> Self {
        WarmupCosineSchedule {
            init: 1e-6,
            peak: 1e-2,
            end: 1e-6,
            warmup_steps,
            decay_steps,
        }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.init + (self.peak - self.init) * frac;
        }
        let into_decay = step - self.warmup_steps;
        if into_decay >= self.decay_steps {
            return self.end;
        }
        let frac = into_decay as f64 / self.decay_steps as f64;
        self.end + (self.peak - self.end) * 0.5 * (1.0 + (PI * frac).cos())
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates and step counter for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub schedule: WarmupCosineSchedule,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(n: usize, schedule: WarmupCosineSchedule, config: AdamWConfig) -> Self {
        OptimizerState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            schedule,
            config,
        }
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn current_learning_rate(&self) -> f64 {
        self.schedule.learning_rate(self.step)
    }
}

/// One decoupled-weight-decay Adam update, in place.
///
/// The weight-decay term is scaled by the learning rate.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "optimizer state length mismatch");
    let lr = state.schedule.learning_rate(state.step);
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bias1 = 1.0 - beta1.powi(state.step as i32);
    let bias2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
    }
}
