use std::f64::consts::{LN_2, PI};

use graybox_core::device::DeviceConfig;
use graybox_core::eval::{jsd, EXPECTATION_SUPPORT, JSD_BINS};
use graybox_core::models::graybox_predict;
use graybox_core::models::pgm::{gaussian_kl, kl_divergence, VariationalParams};
use graybox_core::models::{Whitebox, WhiteboxEntry};
use graybox_core::nn::{BlackboxParams, NUM_PARAMS};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_is_non_negative(mu in -3.0..3.0f64, sigma in 1e-4..3.0f64, prior in 0.05..2.0f64) {
        prop_assert!(gaussian_kl(mu, sigma, prior) >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior(prior in 0.05..2.0f64, shift in 1e-3..1.0f64) {
        prop_assert_eq!(gaussian_kl(0.0, prior, prior), 0.0);
        prop_assert!(gaussian_kl(shift, prior, prior) > 0.0);
        prop_assert!(gaussian_kl(0.0, prior * (1.0 + shift), prior) > 0.0);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(
        a in prop::collection::vec(-1.5..1.5f64, 1..200),
        b in prop::collection::vec(-1.5..1.5f64, 1..200),
    ) {
        let ab = jsd(&a, &b, EXPECTATION_SUPPORT, JSD_BINS).unwrap();
        let ba = jsd(&b, &a, EXPECTATION_SUPPORT, JSD_BINS).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=LN_2).contains(&ab));
        prop_assert_eq!(jsd(&a, &a, EXPECTATION_SUPPORT, JSD_BINS).unwrap(), 0.0);
    }
}

#[test]
fn prior_has_zero_kl() {
    let std = 0.1f64.sqrt();
    assert_eq!(kl_divergence(&VariationalParams::from_prior(std), std), 0.0);
    assert!(kl_divergence(&VariationalParams::init(0), std) > 0.0);
}

fn sweep_entries() -> Vec<(f64, WhiteboxEntry)> {
    let cfg = DeviceConfig {
        trotter_steps: 400,
        ..DeviceConfig::default()
    };
    let wb = Whitebox::new(&cfg).unwrap();
    (0..1000)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / 999.0;
            (theta, wb.entry(theta).unwrap())
        })
        .collect()
}

#[test]
fn predictions_stay_in_range_for_random_weights() {
    let entries = sweep_entries();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(16));
    runner
        .run(&prop::collection::vec(-20.0..20.0f64, NUM_PARAMS), |w| {
            let params = BlackboxParams::new(w).unwrap();
            for (theta, entry) in &entries {
                for v in graybox_predict(&params, *theta, entry).0 {
                    prop_assert!((-1.0..=1.0).contains(&v), "θ = {theta}: {v}");
                }
            }
            Ok(())
        })
        .unwrap();
}
