//! Distribution comparison and control sweeps.

use std::io::Write;

use rayon::prelude::*;

use crate::device::{finite_shot_sample, ControlParams, Device};
use crate::distribution::PredictiveDistribution;
use crate::error::{validation, Error, Result};
use crate::models::pgm::{pgm_posterior_predictive, VariationalParams};
use crate::models::sgm::sgm_uncertainty;
use crate::models::WhiteboxCache;
use crate::nn::BlackboxParams;
use crate::quantum::{agf_against, Expectations, Operator2, PauliTransferMatrix, NUM_CHANNELS};
use crate::seed::{child_seed, rng_for};

/// Default bin count for every JSD.
pub const JSD_BINS: usize = 100;
/// Natural range of AGF values.
pub const AGF_SUPPORT: (f64, f64) = (0.0, 1.0);
/// Natural range of expectation values.
pub const EXPECTATION_SUPPORT: (f64, f64) = (-1.0, 1.0);

/// Counts on uniform bins over `[lo, hi]`. Samples outside the support land
/// in the edge bins and are tallied in `clamped`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub clamped: u64,
}

impl Histogram {
    pub fn new(samples: &[f64], support: (f64, f64), bins: usize) -> Result<Self> {
        let (lo, hi) = support;
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(validation(format!("bad histogram support {support:?} with {bins} bins")));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        let mut clamped = 0;
        for &x in samples {
            if x.is_nan() {
                return Err(validation("NaN sample in histogram"));
            }
            if x < lo || x > hi {
                clamped += 1;
            }
            let idx = ((x - lo) / width).floor();
            let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
            counts[idx] += 1;
        }
        Ok(Histogram {
            edges,
            counts,
            total: samples.len() as u64,
            clamped,
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Jensen-Shannon divergence (nats) between two binned probability vectors.
pub fn jsd_probabilities(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (term(a, m) + term(b, m))
        })
        .sum();
    total.clamp(0.0, std::f64::consts::LN_2)
}

/// Binned JSD between two sample sets on a shared uniform grid.
pub fn jsd(a: &[f64], b: &[f64], support: (f64, f64), bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(validation("JSD needs non-empty sample sets"));
    }
    let p = Histogram::new(a, support, bins)?.probabilities();
    let q = Histogram::new(b, support, bins)?.probabilities();
    Ok(jsd_probabilities(&p, &q))
}

/// Smallest interval holding every sample of both sets, or `None` when all
/// samples share one value.
pub fn pooled_support(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    (lo < hi).then_some((lo, hi))
}

/// Binned JSD with the shared uniform bins spanning the pooled sample range.
///
/// Near-degenerate distributions (AGF close to 1, expectations close to ±1)
/// occupy a sliver of their natural range, where fixed bins would merge them
/// into a single bin and report zero divergence.
pub fn jsd_pooled(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(validation("JSD needs non-empty sample sets"));
    }
    if let Some(x) = a.iter().chain(b).find(|x| !x.is_finite()) {
        return Err(validation(format!("non-finite sample {x} in JSD")));
    }
    match pooled_support(a, b) {
        Some(support) => jsd(a, b, support, bins),
        None => Ok(0.0),
    }
}

/// AGF against `target` of every sample's reconstructed transfer matrix.
pub fn agf_distribution(dist: &PredictiveDistribution, target: &Operator2) -> Result<Vec<f64>> {
    if !target.is_unitary(1e-9) {
        return Err(validation("target is not unitary"));
    }
    let target = PauliTransferMatrix::from_unitary(target);
    dist.samples
        .iter()
        .map(|s| Ok(agf_against(&PauliTransferMatrix::from_expectations(s)?, &target)))
        .collect()
}

/// Expected AGF of the channel given by mean expectations.
pub fn expected_agf(mean: &Expectations, target: &Operator2) -> Result<f64> {
    let target = PauliTransferMatrix::from_unitary(target);
    Ok(agf_against(&PauliTransferMatrix::from_expectations(mean)?, &target))
}

/// JSD per channel between two finite-shot distributions.
pub fn channel_jsd(
    a: &PredictiveDistribution,
    b: &PredictiveDistribution,
) -> Result<[f64; NUM_CHANNELS]> {
    let mut out = [0.0; NUM_CHANNELS];
    for (c, o) in out.iter_mut().enumerate() {
        *o = jsd_pooled(&a.channel(c), &b.channel(c), JSD_BINS)?;
    }
    Ok(out)
}

/// Linear-interpolation quantile, `q ∈ [0, 1]`.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    assert!(!samples.is_empty(), "quantile of empty sample");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Finite-shot device distribution at one control: `trajectories` noise
/// realizations resampled into `n_repeats` vectors.
pub fn device_distribution(
    device: &Device,
    theta: f64,
    trajectories: usize,
    n_shots: u64,
    n_repeats: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    let ensemble = device.intermediate_ensemble(
        &ControlParams::new(theta)?,
        trajectories,
        child_seed(seed, "device-ensemble", 0),
    )?;
    finite_shot_sample(&ensemble, n_shots, n_repeats, &mut rng_for(seed, "device-shots", 0))
}

/// What a sweep compares.
pub struct Backends<'a> {
    pub device: &'a Device,
    pub sgm: Option<&'a BlackboxParams>,
    pub pgm: Option<&'a VariationalParams>,
}

/// Sampling sizes for a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSettings {
    pub n_shots: u64,
    pub n_repeats: usize,
    pub trajectories: usize,
}

/// Distributions and AGF samples of one backend at one control.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendSamples {
    pub distribution: PredictiveDistribution,
    pub agf: Vec<f64>,
}

impl BackendSamples {
    fn new(distribution: PredictiveDistribution, target: &Operator2) -> Result<Self> {
        let agf = agf_distribution(&distribution, target)?;
        Ok(BackendSamples { distribution, agf })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub theta: f64,
    pub device: BackendSamples,
    pub sgm: BackendSamples,
    pub pgm: BackendSamples,
    pub jsd_sgm: f64,
    pub jsd_pgm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(validation("grid needs at least one point"));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect())
}

/// Compare device, SGM and PGM AGF distributions against √X over `thetas`.
pub fn sweep(
    backends: &Backends,
    cache: &mut WhiteboxCache,
    thetas: &[f64],
    settings: SweepSettings,
    seed: u64,
) -> Result<SweepResult> {
    let sgm = backends
        .sgm
        .ok_or_else(|| Error::Config("sweep needs a trained SGM checkpoint".into()))?;
    let pgm = backends
        .pgm
        .ok_or_else(|| Error::Config("sweep needs a trained PGM checkpoint".into()))?;
    for &t in thetas {
        ControlParams::new(t)?;
    }
    cache.fill(thetas.iter().copied())?;
    let cache = &*cache;
    let target = Operator2::sqrt_x();
    let SweepSettings {
        n_shots,
        n_repeats,
        trajectories,
    } = settings;
    let points = thetas
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let i = i as u64;
            let device = device_distribution(
                backends.device,
                theta,
                trajectories,
                n_shots,
                n_repeats,
                child_seed(seed, "sweep-device", i),
            )?;
            let sgm = sgm_uncertainty(sgm, theta, cache, n_shots, n_repeats, &mut rng_for(seed, "sweep-sgm", i))?;
            let pgm = pgm_posterior_predictive(pgm, theta, cache, n_shots, n_repeats, &mut rng_for(seed, "sweep-pgm", i))?;
            let device = BackendSamples::new(device, &target)?;
            let sgm = BackendSamples::new(sgm, &target)?;
            let pgm = BackendSamples::new(pgm, &target)?;
            let jsd_sgm = jsd_pooled(&sgm.agf, &device.agf, JSD_BINS)?;
            let jsd_pgm = jsd_pooled(&pgm.agf, &device.agf, JSD_BINS)?;
            Ok(SweepPoint {
                theta,
                device,
                sgm,
                pgm,
                jsd_sgm,
                jsd_pgm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points })
}

impl SweepResult {
    pub fn mean_jsd_sgm(&self) -> f64 {
        mean(&self.points.iter().map(|p| p.jsd_sgm).collect::<Vec<_>>())
    }

    pub fn mean_jsd_pgm(&self) -> f64 {
        mean(&self.points.iter().map(|p| p.jsd_pgm).collect::<Vec<_>>())
    }

    fn rows(&self) -> impl Iterator<Item = (&SweepPoint, &'static str, &BackendSamples)> {
        self.points.iter().flat_map(|p| {
            [("device", &p.device), ("sgm", &p.sgm), ("pgm", &p.pgm)]
                .into_iter()
                .map(move |(name, s)| (p, name, s))
        })
    }

    /// Summary CSV: AGF quantiles per backend and the two JSDs per control.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["theta", "backend", "agf_q05", "agf_q50", "agf_q95", "jsd_sgm", "jsd_pgm"])?;
        for (p, name, s) in self.rows() {
            w.write_record([
                format!("{:.16e}", p.theta),
                name.to_string(),
                format!("{:.16e}", quantile(&s.agf, 0.05)),
                format!("{:.16e}", quantile(&s.agf, 0.5)),
                format!("{:.16e}", quantile(&s.agf, 0.95)),
                format!("{:.16e}", p.jsd_sgm),
                format!("{:.16e}", p.jsd_pgm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Every AGF sample, one row each.
    pub fn write_agf_samples<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["theta", "backend", "sample", "agf"])?;
        for (p, name, s) in self.rows() {
            for (j, a) in s.agf.iter().enumerate() {
                w.write_record([
                    format!("{:.16e}", p.theta),
                    name.to_string(),
                    j.to_string(),
                    format!("{a:.16e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Every finite-shot 18-vector, one row each.
    pub fn write_expectation_samples<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["theta".to_string(), "backend".into(), "sample".into()];
        header.extend(crate::quantum::Channel::all().map(|c| c.column_name()));
        w.write_record(&header)?;
        for (p, name, s) in self.rows() {
            for (j, e) in s.distribution.samples.iter().enumerate() {
                let mut row = vec![format!("{:.16e}", p.theta), name.to_string(), j.to_string()];
                row.extend(e.0.iter().map(|v| format!("{v:.16e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::Provenance;
    use crate::seed::rng_for;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{LN_2, PI};

    #[test]
    fn histogram_counts_and_clamping() {
        let h = Histogram::new(&[-0.5, 0.0, 0.25, 0.999, 1.0, 1.7], (0.0, 1.0), 4).unwrap();
        assert_eq!(h.counts, vec![2, 1, 0, 3]);
        assert_eq!(h.total, 6);
        assert_eq!(h.clamped, 2);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        assert!(Histogram::new(&[f64::NAN], (0.0, 1.0), 4).is_err());
        assert!(Histogram::new(&[0.1], (1.0, 0.0), 4).is_err());
    }

    #[test]
    fn jsd_examples() {
        let a = [0.1, 0.2, 0.3];
        assert_eq!(jsd(&a, &a, (0.0, 1.0), 100).unwrap(), 0.0);
        let d = jsd(&[0.05; 10], &[0.95; 7], (0.0, 1.0), 100).unwrap();
        assert!((d - LN_2).abs() < 1e-15, "{d}");
        assert!(jsd(&[], &a, (0.0, 1.0), 100).is_err());
    }

    #[test]
    fn jsd_matches_binned_gaussian_oracle() {
        let n = 10_000;
        let mut rng = rng_for(8, "jsd", 0);
        let sample = |mu: f64, rng: &mut crate::seed::Rng| -> Vec<f64> {
            let d = Normal::new(mu, 0.2).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let a = sample(0.0, &mut rng);
        let b = sample(0.5, &mut rng);
        let got = jsd(&a, &b, (-1.0, 1.0), 100).unwrap();

        // Bin masses by midpoint quadrature of the analytic densities, with
        // the tails folded into the edge bins.
        let pdf = |x: f64, mu: f64| {
            (-(x - mu) * (x - mu) / (2.0 * 0.04)).exp() / (0.2 * (2.0 * PI).sqrt())
        };
        let masses = |mu: f64| {
            let mut m = vec![0.0; 100];
            let sub = 200;
            let h = 2.0 / (100 * sub) as f64;
            for (bin, v) in m.iter_mut().enumerate() {
                for s in 0..sub {
                    let x = -1.0 + ((bin * sub + s) as f64 + 0.5) * h;
                    *v += pdf(x, mu) * h;
                }
            }
            let inside: f64 = m.iter().sum();
            let left = 0.5 * (1.0 - inside); // tails are tiny; split evenly
            m[0] += left;
            m[99] += left;
            m
        };
        let want = jsd_probabilities(&masses(0.0), &masses(0.5));
        assert!((got - want).abs() < 0.02, "{got} vs {want}");
    }

    #[test]
    fn jsd_fuzz_properties() {
        let mut rng = rng_for(3, "fuzz", 0);
        for _ in 0..100 {
            let na = rng.random_range(1..300);
            let nb = rng.random_range(1..300);
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(-0.2..1.2)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random::<f64>().powi(3)).collect();
            let ab = jsd(&a, &b, AGF_SUPPORT, JSD_BINS).unwrap();
            assert_eq!(ab, jsd(&b, &a, AGF_SUPPORT, JSD_BINS).unwrap());
            assert!((0.0..=LN_2).contains(&ab));
            assert_eq!(jsd(&a, &a, AGF_SUPPORT, JSD_BINS).unwrap(), 0.0);
            let pooled = jsd_pooled(&a, &b, JSD_BINS).unwrap();
            assert_eq!(pooled, jsd_pooled(&b, &a, JSD_BINS).unwrap());
            assert!((0.0..=LN_2).contains(&pooled));
            assert_eq!(jsd_pooled(&a, &a, JSD_BINS).unwrap(), 0.0);
        }
    }

    #[test]
    fn pooled_jsd_resolves_narrow_distributions() {
        // Two lattices of finite-shot values near 1 that differ slightly.
        let a: Vec<f64> = (0..1000).map(|i| 1.0 - 0.002 * (i % 3) as f64).collect();
        let b: Vec<f64> = (0..1000).map(|i| 1.0 - 0.002 * (i % 2) as f64).collect();
        assert_eq!(jsd(&a, &b, AGF_SUPPORT, JSD_BINS).unwrap(), 0.0);
        let d = jsd_pooled(&a, &b, JSD_BINS).unwrap();
        // Exact discrete JSD of {1/3, 1/3, 1/3} vs {1/2, 1/2, 0}.
        let want = jsd_probabilities(&[1.0 / 3.0; 3], &[0.5, 0.5, 0.0]);
        assert!((d - want).abs() < 1e-3, "{d} vs {want}");
        assert_eq!(jsd_pooled(&[0.7; 4], &[0.7; 9], JSD_BINS).unwrap(), 0.0);
        assert!((jsd_pooled(&[0.7; 4], &[0.8; 9], JSD_BINS).unwrap() - LN_2).abs() < 1e-15);
        assert!(jsd_pooled(&[f64::NAN], &[0.1], JSD_BINS).is_err());
    }

    #[test]
    fn pooled_jsd_is_affine_invariant() {
        let mut rng = rng_for(4, "affine", 0);
        let a: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..400).map(|_| rng.random::<f64>().powi(2)).collect();
        let base = jsd_pooled(&a, &b, JSD_BINS).unwrap();
        let map = |v: &[f64]| v.iter().map(|x| 1.0 - 1e-3 * x).collect::<Vec<_>>();
        let moved = jsd_pooled(&map(&a), &map(&b), JSD_BINS).unwrap();
        assert!((base - moved).abs() < 0.02, "{base} vs {moved}");
    }

    #[test]
    fn agf_of_exact_channels() {
        let target = Operator2::sqrt_x();
        let ideal = Expectations::of_unitary(&target);
        let dist = PredictiveDistribution {
            samples: vec![ideal; 5],
            provenance: Provenance::Device,
        };
        for a in agf_distribution(&dist, &target).unwrap() {
            assert!((a - 1.0).abs() < 1e-12);
        }
        let id = PredictiveDistribution {
            samples: vec![Expectations::of_unitary(&Operator2::identity()); 3],
            provenance: Provenance::Device,
        };
        let agf = agf_distribution(&id, &target).unwrap();
        assert!(agf.iter().all(|a| (a - 2.0 / 3.0).abs() < 1e-12));
        assert!(agf.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn quantiles() {
        let xs = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 5.0);
        assert_eq!(quantile(&xs, 0.125), 1.5);
        assert_eq!(grid(1.3, 1.7, 21).unwrap().len(), 21);
        assert_eq!(grid(1.3, 1.7, 21).unwrap()[20], 1.7);
    }

    #[test]
    fn ideal_models_track_noiseless_device() {
        use crate::device::DeviceConfig;
        use crate::models::ideal_blackbox;
        use crate::models::pgm::softplus_inverse;
        use crate::noise::PsdSpec;

        let cfg = DeviceConfig {
            trotter_steps: 1000,
            ..DeviceConfig::default()
        }
        .noiseless();
        let device = Device::new(&cfg, &PsdSpec::default()).unwrap();
        let mut cache = WhiteboxCache::new(&cfg).unwrap();
        let sgm = ideal_blackbox();
        let pgm = VariationalParams::new(
            sgm.as_slice().to_vec(),
            vec![softplus_inverse(1e-9); crate::nn::NUM_PARAMS],
        )
        .unwrap();
        let backends = Backends {
            device: &device,
            sgm: Some(&sgm),
            pgm: Some(&pgm),
        };
        let settings = SweepSettings {
            n_shots: 1000,
            n_repeats: 1000,
            trajectories: 1,
        };
        let run = |cache: &mut WhiteboxCache| sweep(&backends, cache, &[PI / 2.0], settings, 4).unwrap();
        let a = run(&mut cache);
        let p = &a.points[0];
        assert!(p.jsd_sgm < 0.1 && p.jsd_pgm < 0.1, "{} {}", p.jsd_sgm, p.jsd_pgm);
        assert_eq!(a, run(&mut cache));

        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("theta,backend,agf_q05,agf_q50,agf_q95,jsd_sgm,jsd_pgm\n"));
        assert_eq!(text.lines().count(), 4);

        let missing = Backends { pgm: None, ..backends };
        assert!(matches!(
            sweep(&missing, &mut cache, &[1.0], settings, 0),
            Err(Error::Config(_))
        ));
    }
}
