//! √X gate calibration through the trained models.
//!
//! The SGM path minimizes `(1 − AGF)²` of the predicted channel. The PGM
//! path maximizes the binomial likelihood of the counts an ideal √X would
//! produce, using posterior-mean weights. Both descend on θ with AdamW; the
//! whitebox part of `dŷ/dθ` comes from central differences of `U₀(θ)`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::{finite_shot_sample, ControlParams, Device};
use crate::distribution::{binomial_log_pmf, expectation_to_count, LnFactorial};
use crate::error::{validation, Error, Result};
use crate::eval::{agf_distribution, channel_jsd, jsd_pooled, mean, JSD_BINS};
use crate::models::pgm::{pgm_posterior_predictive, VariationalParams, PROBABILITY_CLAMP};
use crate::models::sgm::sgm_uncertainty;
use crate::models::{head_gradients, predict_from_heads, ModelKind, Whitebox, WhiteboxCache};
use crate::nn::optim::{adamw_step, AdamWConfig, OptimizerState, WarmupCosineSchedule};
use crate::nn::{self, BlackboxParams, DensityEntries, NUM_PARAMS};
use crate::quantum::{agf_against, Channel, Expectations, Operator2, PauliTransferMatrix, NUM_CHANNELS};
use crate::seed::{child_seed, rng_for};

/// Optimizer settings for one calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationHyper {
    pub iterations: usize,
    pub schedule: WarmupCosineSchedule,
    pub optimizer: AdamWConfig,
    /// Step of the central difference on `U₀(θ)`.
    pub fd_step: f64,
    /// Initial θ is drawn uniformly from this interval.
    pub init_range: (f64, f64),
}

impl CalibrationHyper {
    /// SGM control block.
    pub fn sgm() -> Self {
        CalibrationHyper {
            iterations: 1000,
            schedule: WarmupCosineSchedule::new(100, 1000),
            optimizer: AdamWConfig::default(),
            fd_step: 1e-4,
            init_range: (1.3, 1.7),
        }
    }

    /// PGM control block.
    pub fn pgm() -> Self {
        CalibrationHyper {
            iterations: 1500,
            schedule: WarmupCosineSchedule::new(800, 8000),
            ..Self::sgm()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(validation("calibration needs at least one iteration"));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 0.1) {
            return Err(validation(format!("fd_step = {} outside (0, 0.1)", self.fd_step)));
        }
        let (lo, hi) = self.init_range;
        if !(0.0 <= lo && lo < hi && hi <= 2.0 * PI) {
            return Err(validation(format!("init_range {:?} not inside [0, 2π]", self.init_range)));
        }
        Ok(())
    }
}

impl Default for CalibrationHyper {
    fn default() -> Self {
        Self::sgm()
    }
}

/// One optimizer iterate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub theta: f64,
    pub objective: f64,
}

/// Outcome of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub model: ModelKind,
    pub theta_star: f64,
    pub initial_theta: f64,
    /// Objective at each iterate before its update.
    pub trace: Vec<TracePoint>,
    pub gradient_method: String,
}

/// Map θ back into `[0, 2π]` by reflection at the boundaries.
pub fn reflect(theta: f64) -> f64 {
    let period = 4.0 * PI;
    let t = theta.rem_euclid(period);
    if t > 2.0 * PI {
        period - t
    } else {
        t
    }
}

/// `∂AGF/∂ŷ` for a fixed target; the reconstruction is affine in ŷ.
fn agf_gradient(target: &PauliTransferMatrix) -> [f64; NUM_CHANNELS] {
    let base = agf_against(&PauliTransferMatrix::from_expectations_unchecked(&Expectations([0.0; NUM_CHANNELS])), target);
    let mut out = [0.0; NUM_CHANNELS];
    for (c, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; NUM_CHANNELS];
        e[c] = 1.0;
        *o = agf_against(&PauliTransferMatrix::from_expectations_unchecked(&Expectations(e)), target) - base;
    }
    out
}

fn density_derivative(plus: &DensityEntries, minus: &DensityEntries, width: f64) -> [f64; 3] {
    [
        (plus.population0 - minus.population0) / width,
        (plus.coherence.re - minus.coherence.re) / width,
        (plus.coherence.im - minus.coherence.im) / width,
    ]
}

/// Graybox prediction at θ and `dŷ/dθ`-weighted objective gradient.
///
/// `objective(ŷ)` returns the value and `∂J/∂ŷ`.
fn objective_and_gradient<F>(
    params: &BlackboxParams,
    whitebox: &Whitebox,
    theta: f64,
    fd_step: f64,
    objective: &F,
) -> Result<(f64, f64)>
where
    F: Fn(&Expectations) -> (f64, [f64; NUM_CHANNELS]),
{
    let entry = whitebox.entry(theta)?;
    let cache = nn::forward(params, theta);
    let pred = predict_from_heads(&cache.heads, &entry);
    let (value, d_pred) = objective(&pred);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "calibration objective".into(),
            detail: format!("theta = {theta}, prediction = {:?}", pred.0),
        });
    }
    let d_heads = head_gradients(&cache.heads, &entry, &d_pred);
    let mut scratch = vec![0.0; NUM_PARAMS];
    let d_network = nn::backward(params, &cache, &d_heads, &mut scratch);

    let lo = (theta - fd_step).max(0.0);
    let hi = (theta + fd_step).min(2.0 * PI);
    let (plus, minus) = (whitebox.entry(hi)?, whitebox.entry(lo)?);
    let mut d_whitebox = 0.0;
    for ch in Channel::all() {
        let d = d_pred[ch.index()];
        if d == 0.0 {
            continue;
        }
        let s = ch.state.index();
        let drho = density_derivative(&plus.post_states[s], &minus.post_states[s], hi - lo);
        let g = cache.heads[ch.observable.index()].density_grad();
        d_whitebox += d * (g[0] * drho[0] + g[1] * drho[1] + g[2] * drho[2]);
    }
    Ok((value, d_network + d_whitebox))
}

fn descend<F>(
    model: ModelKind,
    params: &BlackboxParams,
    whitebox: &Whitebox,
    hyper: &CalibrationHyper,
    seed: u64,
    objective: F,
) -> Result<CalibrationResult>
where
    F: Fn(&Expectations) -> (f64, [f64; NUM_CHANNELS]),
{
    hyper.validate()?;
    let (lo, hi) = hyper.init_range;
    let initial_theta = rng_for(seed, "calibration-init", 0).random_range(lo..hi);
    let mut theta = [initial_theta];
    let mut state = OptimizerState::new(1, hyper.schedule, hyper.optimizer);
    let mut trace = Vec::with_capacity(hyper.iterations);
    for _ in 0..hyper.iterations {
        let (value, grad) = objective_and_gradient(params, whitebox, theta[0], hyper.fd_step, &objective)?;
        trace.push(TracePoint {
            theta: theta[0],
            objective: value,
        });
        adamw_step(&mut state, &mut theta, &[grad]);
        theta[0] = reflect(theta[0]);
    }
    Ok(CalibrationResult {
        model,
        theta_star: theta[0],
        initial_theta,
        trace,
        gradient_method: format!("central-difference(h={:e})", hyper.fd_step),
    })
}

/// Minimize `(1 − AGF)²` of the SGM prediction against `target`.
pub fn calibrate_sgm(
    params: &BlackboxParams,
    cache: &WhiteboxCache,
    target: &Operator2,
    hyper: &CalibrationHyper,
    seed: u64,
) -> Result<CalibrationResult> {
    if !target.is_unitary(1e-9) {
        return Err(validation("target is not unitary"));
    }
    let target = PauliTransferMatrix::from_unitary(target);
    let d_agf = agf_gradient(&target);
    descend(ModelKind::Sgm, params, cache.whitebox(), hyper, seed, |pred| {
        let agf = agf_against(&PauliTransferMatrix::from_expectations_unchecked(pred), &target);
        let r = 1.0 - agf;
        (r * r, d_agf.map(|g| -2.0 * r * g))
    })
}

/// Maximize the binomial likelihood of the target's ideal counts under the
/// posterior-mean PGM. The trace records the negative log-likelihood.
pub fn calibrate_pgm(
    vparams: &VariationalParams,
    cache: &WhiteboxCache,
    target: &Operator2,
    n_shots: u64,
    hyper: &CalibrationHyper,
    seed: u64,
) -> Result<CalibrationResult> {
    if !target.is_unitary(1e-9) {
        return Err(validation("target is not unitary"));
    }
    if n_shots == 0 {
        return Err(validation("n_shots must be positive"));
    }
    let ideal = Expectations::of_unitary(target);
    let counts = ideal.0.map(|y| expectation_to_count(y, n_shots));
    let table = LnFactorial::new(n_shots);
    descend(ModelKind::Pgm, &vparams.mean_params(), cache.whitebox(), hyper, seed, |pred| {
        let mut nll = 0.0;
        let mut d = [0.0; NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            let k = counts[c];
            let p = (1.0 + pred.0[c]) / 2.0;
            nll -= binomial_log_pmf(&table, k, n_shots, p, PROBABILITY_CLAMP);
            if p > PROBABILITY_CLAMP && p < 1.0 - PROBABILITY_CLAMP {
                d[c] = -0.5 * (k as f64 / p - (n_shots - k) as f64 / (1.0 - p));
            }
        }
        (nll, d)
    })
}

/// Sampling sizes for [`evaluate_calibration`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluationSettings {
    pub n_shots: u64,
    pub n_repeats: usize,
    pub trajectories: usize,
}

/// Device and model AGF distributions at one control, with JSDs.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationEvaluation {
    pub theta: f64,
    /// AGF of the device's trajectory-averaged channel.
    pub device_ensemble_agf: f64,
    pub expected_agf_device: f64,
    pub expected_agf_sgm: f64,
    pub expected_agf_pgm: f64,
    pub jsd_sgm: f64,
    pub jsd_pgm: f64,
    pub channel_jsd_sgm: [f64; NUM_CHANNELS],
    pub channel_jsd_pgm: [f64; NUM_CHANNELS],
    pub agf_device: Vec<f64>,
    pub agf_sgm: Vec<f64>,
    pub agf_pgm: Vec<f64>,
}

impl CalibrationEvaluation {
    /// `D(SGM‖device) / D(PGM‖device)`.
    pub fn ratio(&self) -> f64 {
        self.jsd_sgm / self.jsd_pgm
    }
}

/// Compare device, SGM and PGM at `theta` against √X.
pub fn evaluate_calibration(
    theta: f64,
    device: &Device,
    cache: &mut WhiteboxCache,
    sgm: &BlackboxParams,
    pgm: &VariationalParams,
    settings: EvaluationSettings,
    seed: u64,
) -> Result<CalibrationEvaluation> {
    let control = ControlParams::new(theta)?;
    cache.get_or_insert(theta)?;
    let cache = &*cache;
    let target = Operator2::sqrt_x();
    let ensemble = device.intermediate_ensemble(&control, settings.trajectories, child_seed(seed, "eval-ensemble", 0))?;
    let device_dist = finite_shot_sample(
        &ensemble,
        settings.n_shots,
        settings.n_repeats,
        &mut rng_for(seed, "eval-device", 0),
    )?;
    let sgm_dist = sgm_uncertainty(sgm, theta, cache, settings.n_shots, settings.n_repeats, &mut rng_for(seed, "eval-sgm", 0))?;
    let pgm_dist = pgm_posterior_predictive(pgm, theta, cache, settings.n_shots, settings.n_repeats, &mut rng_for(seed, "eval-pgm", 0))?;
    let [agf_device, agf_sgm, agf_pgm] = [&device_dist, &sgm_dist, &pgm_dist]
        .map(|d| agf_distribution(d, &target));
    let (agf_device, agf_sgm, agf_pgm) = (agf_device?, agf_sgm?, agf_pgm?);
    let target_ptm = PauliTransferMatrix::from_unitary(&target);
    Ok(CalibrationEvaluation {
        theta,
        device_ensemble_agf: agf_against(&PauliTransferMatrix::from_expectations(&ensemble.mean())?, &target_ptm),
        expected_agf_device: mean(&agf_device),
        expected_agf_sgm: mean(&agf_sgm),
        expected_agf_pgm: mean(&agf_pgm),
        jsd_sgm: jsd_pooled(&agf_sgm, &agf_device, JSD_BINS)?,
        jsd_pgm: jsd_pooled(&agf_pgm, &agf_device, JSD_BINS)?,
        channel_jsd_sgm: channel_jsd(&sgm_dist, &device_dist)?,
        channel_jsd_pgm: channel_jsd(&pgm_dist, &device_dist)?,
        agf_device,
        agf_sgm,
        agf_pgm,
    })
}

/// Expected device AGF (trajectory-averaged channel) at several controls.
pub fn device_expected_agf(device: &Device, thetas: &[f64], trajectories: usize, seed: u64) -> Result<Vec<f64>> {
    let target = PauliTransferMatrix::from_unitary(&Operator2::sqrt_x());
    thetas
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let e = device.intermediate_ensemble(
                &ControlParams::new(theta)?,
                trajectories,
                child_seed(seed, "expected-agf", i as u64),
            )?;
            Ok(agf_against(&PauliTransferMatrix::from_expectations(&e.mean())?, &target))
        })
        .collect()
}

/// One Table-II column: a calibrated control and its evaluation.
pub struct CalibrationRow<'a> {
    pub result: &'a CalibrationResult,
    pub evaluation: &'a CalibrationEvaluation,
}

/// Table-II-shaped CSV, one row per calibrator.
pub fn write_calibration_csv<W: Write>(rows: &[CalibrationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "theta_star",
        "agf_device",
        "agf_sgm",
        "agf_pgm",
        "agf_device_ensemble",
        "jsd_sgm",
        "jsd_pgm",
        "ratio",
    ])?;
    for r in rows {
        let e = r.evaluation;
        let model = match r.result.model {
            ModelKind::Sgm => "sgm",
            ModelKind::Pgm => "pgm",
        };
        let mut row = vec![model.to_string()];
        row.extend(
            [
                r.result.theta_star,
                e.expected_agf_device,
                e.expected_agf_sgm,
                e.expected_agf_pgm,
                e.device_ensemble_agf,
                e.jsd_sgm,
                e.jsd_pgm,
                e.ratio(),
            ]
            .iter()
            .map(|v| format!("{v:.16e}")),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-channel JSD bars: one row per channel.
pub fn write_channel_jsd_csv<W: Write>(evaluation: &CalibrationEvaluation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["channel", "jsd_sgm", "jsd_pgm"])?;
    for ch in Channel::all() {
        w.write_record([
            ch.column_name(),
            format!("{:.16e}", evaluation.channel_jsd_sgm[ch.index()]),
            format!("{:.16e}", evaluation.channel_jsd_pgm[ch.index()]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Every AGF sample of an evaluation.
pub fn write_agf_samples_csv<W: Write>(evaluation: &CalibrationEvaluation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["backend", "sample", "agf"])?;
    for (name, samples) in [
        ("device", &evaluation.agf_device),
        ("sgm", &evaluation.agf_sgm),
        ("pgm", &evaluation.agf_pgm),
    ] {
        for (j, a) in samples.iter().enumerate() {
            w.write_record([name.to_string(), j.to_string(), format!("{a:.16e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The trajectory of θ and the objective.
pub fn write_trace_csv<W: Write>(result: &CalibrationResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "theta", "objective"])?;
    for (i, p) in result.trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:.16e}", p.theta), format!("{:.16e}", p.objective)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::models::ideal_blackbox;
    use crate::models::pgm::softplus_inverse;
    use crate::noise::PsdSpec;

    fn small() -> DeviceConfig {
        DeviceConfig {
            trotter_steps: 1000,
            ..DeviceConfig::default()
        }
        .noiseless()
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect(1.0), 1.0);
        assert!((reflect(-0.25) - 0.25).abs() < 1e-15);
        assert!((reflect(2.0 * PI + 0.25) - (2.0 * PI - 0.25)).abs() < 1e-12);
        for i in -50..50 {
            let t = reflect(0.37 * i as f64);
            assert!((0.0..=2.0 * PI).contains(&t));
        }
    }

    #[test]
    fn agf_gradient_is_exact() {
        let target = PauliTransferMatrix::from_unitary(&Operator2::sqrt_x());
        let g = agf_gradient(&target);
        let y = Expectations::of_unitary(&Operator2::identity());
        let base = agf_against(&PauliTransferMatrix::from_expectations_unchecked(&y), &target);
        for c in 0..NUM_CHANNELS {
            let mut z = y;
            z.0[c] += 0.1;
            let moved = agf_against(&PauliTransferMatrix::from_expectations_unchecked(&z), &target);
            assert!(((moved - base) / 0.1 - g[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let cache = WhiteboxCache::new(&small()).unwrap();
        let params = BlackboxParams::init(6);
        let target = PauliTransferMatrix::from_unitary(&Operator2::sqrt_x());
        let d_agf = agf_gradient(&target);
        let objective = |pred: &Expectations| {
            let r = 1.0 - agf_against(&PauliTransferMatrix::from_expectations_unchecked(pred), &target);
            (r * r, d_agf.map(|g| -2.0 * r * g))
        };
        for theta in [0.5, 1.5, 2.8, 4.4] {
            let (_, g) = objective_and_gradient(&params, cache.whitebox(), theta, 1e-4, &objective).unwrap();
            let f = |t: f64| objective_and_gradient(&params, cache.whitebox(), t, 1e-4, &objective).unwrap().0;
            let h = 1e-5;
            let fd = (f(theta + h) - f(theta - h)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-5 * fd.abs().max(1e-3), "{theta}: {fd} vs {g}");
        }
    }

    #[test]
    fn ideal_models_recover_half_pi() {
        let cfg = small();
        let cache = WhiteboxCache::new(&cfg).unwrap();
        let sgm = ideal_blackbox();
        let target = Operator2::sqrt_x();
        let a = calibrate_sgm(&sgm, &cache, &target, &CalibrationHyper::sgm(), 3).unwrap();
        assert!((a.theta_star - PI / 2.0).abs() < 0.02, "{}", a.theta_star);
        assert!(a.trace.iter().all(|p| p.objective.is_finite()));
        let tail = &a.trace[a.trace.len() - 100..];
        assert!(tail.windows(2).all(|w| w[1].objective <= w[0].objective + 1e-6));
        assert_eq!(a, calibrate_sgm(&sgm, &cache, &target, &CalibrationHyper::sgm(), 3).unwrap());

        let pgm = VariationalParams::new(sgm.into_inner(), vec![softplus_inverse(0.05); NUM_PARAMS]).unwrap();
        let b = calibrate_pgm(&pgm, &cache, &target, 1000, &CalibrationHyper::pgm(), 3).unwrap();
        assert!((b.theta_star - PI / 2.0).abs() < 0.02, "{}", b.theta_star);
    }

    #[test]
    fn evaluation_at_ideal_control() {
        let cfg = small();
        let device = Device::new(&cfg, &PsdSpec::default()).unwrap();
        let mut cache = WhiteboxCache::new(&cfg).unwrap();
        let sgm = ideal_blackbox();
        let pgm = VariationalParams::new(sgm.as_slice().to_vec(), vec![softplus_inverse(1e-9); NUM_PARAMS]).unwrap();
        let settings = EvaluationSettings {
            n_shots: 1000,
            n_repeats: 1000,
            trajectories: 1,
        };
        let e = evaluate_calibration(PI / 2.0, &device, &mut cache, &sgm, &pgm, settings, 1).unwrap();
        assert!(e.device_ensemble_agf > 0.999);
        let bound = 1.0 + 3.0 / (settings.n_shots as f64).sqrt();
        for a in e.agf_device.iter().chain(&e.agf_sgm).chain(&e.agf_pgm) {
            assert!(*a <= bound);
        }
        assert!(e.jsd_sgm < 0.1 && e.jsd_pgm < 0.1);
        let again = evaluate_calibration(PI / 2.0, &device, &mut cache, &sgm, &pgm, settings, 1).unwrap();
        assert_eq!(e, again);
    }
}
