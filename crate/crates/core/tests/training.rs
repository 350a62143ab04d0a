use std::sync::OnceLock;

use graybox_core::dataset::{generate_dataset, split, DatasetSplit};
use graybox_core::device::{Device, DeviceConfig};
use graybox_core::eval::quantile;
use graybox_core::models::pgm::{pgm_posterior_predictive, pgm_train, PgmHyper};
use graybox_core::models::sgm::{sgm_predict, sgm_train, SgmHyper};
use graybox_core::models::WhiteboxCache;
use graybox_core::noise::PsdSpec;
use graybox_core::quantum::NUM_CHANNELS;
use graybox_core::seed::rng_for;

const SEED: u64 = 31;

fn config() -> DeviceConfig {
    DeviceConfig {
        trotter_steps: 2000,
        ..DeviceConfig::default()
    }
    .noiseless()
}

fn noiseless_split() -> &'static DatasetSplit {
    static SPLIT: OnceLock<DatasetSplit> = OnceLock::new();
    SPLIT.get_or_init(|| {
        let device = Device::new(&config(), &PsdSpec::default()).unwrap();
        let records = generate_dataset(&device, 300, 1000, 1, SEED).unwrap();
        split(&records, 0.9, SEED).unwrap()
    })
}

#[test]
fn sgm_reaches_shot_noise_floor_on_noiseless_data() {
    let data = noiseless_split();
    let mut cache = WhiteboxCache::new(&config()).unwrap();
    let out = sgm_train(&data.train, &mut cache, &SgmHyper::default(), SEED).unwrap();
    cache.fill(data.test.iter().map(|r| r.theta)).unwrap();

    let (mut mse, mut floor) = (0.0, 0.0);
    for r in &data.test {
        let y = sgm_predict(&out.params, r.theta, &cache).unwrap();
        for c in 0..NUM_CHANNELS {
            mse += (y.0[c] - r.exps.0[c]).powi(2);
            floor += (1.0 - y.0[c] * y.0[c]) / r.n_shots as f64;
        }
    }
    let k = (data.test.len() * NUM_CHANNELS) as f64;
    let (mse, floor) = (mse / k, floor / k);
    assert!(mse <= 2.0 * floor, "test MSE {mse:.3e} above twice the floor {floor:.3e}");
}

#[test]
fn pgm_posterior_predictive_covers_train_labels() {
    let data = noiseless_split();
    let mut cache = WhiteboxCache::new(&config()).unwrap();
    let out = pgm_train(&data.train, &mut cache, &PgmHyper::default(), SEED).unwrap();

    let (mut inside, mut within_3sd) = (0usize, 0usize);
    for (i, r) in data.train.iter().enumerate() {
        let dist =
            pgm_posterior_predictive(&out.vparams, r.theta, &cache, r.n_shots, 1000, &mut rng_for(SEED, "check", i as u64))
                .unwrap();
        let (mean, var) = (dist.mean(), dist.variance());
        for c in 0..NUM_CHANNELS {
            let ch = dist.channel(c);
            let label = r.exps.0[c];
            if (quantile(&ch, 0.025)..=quantile(&ch, 0.975)).contains(&label) {
                inside += 1;
            }
            if (mean.0[c] - label).abs() <= 3.0 * var.0[c].sqrt() {
                within_3sd += 1;
            }
        }
    }
    let k = (data.train.len() * NUM_CHANNELS) as f64;
    let coverage = inside as f64 / k;
    let within = within_3sd as f64 / k;
    assert!(coverage >= 0.8, "95% interval covers {coverage:.3} of labels");
    assert!(within >= 0.95, "mean within 3 SD for {within:.3} of labels");

    // Window-100 moving average over the second half may only dip by 5% of its running best.
    let trace = &out.elbo_trace;
    let smoothed: Vec<f64> = trace.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let mut best = f64::NEG_INFINITY;
    for &s in &smoothed[smoothed.len() / 2..] {
        best = best.max(s);
        assert!(s >= best - 0.05 * best.abs(), "smoothed ELBO fell to {s:.4} from {best:.4}");
    }
}
