//! Logistic detector oracles: chance level and rescaling invariance.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use vac_core::{detection_rate, fit_detector};

fn draws(n: usize, shape: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let g = Gamma::new(shape, 0.01).unwrap();
    (0..n).map(|_| g.sample(r)).collect()
}

#[test]
fn identical_populations_detect_at_chance() {
    let mut rates = Vec::new();
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (fc, fa) = (draws(2000, 4.0, &mut r), draws(2000, 4.0, &mut r));
        let (ec, ea) = (draws(2000, 4.0, &mut r), draws(2000, 4.0, &mut r));
        let fit = fit_detector(&fc, &fa).unwrap();
        let rate = detection_rate(&fit.model, &ec, &ea).unwrap();
        assert!((rate - 0.5).abs() <= 0.05, "seed {seed}: {rate}");
        rates.push(rate);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!((mean - 0.5).abs() <= 0.02, "{mean}");
}

#[test]
fn shifted_populations_are_detected() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (fc, fa) = (draws(1000, 4.0, &mut r), draws(1000, 16.0, &mut r));
    let (ec, ea) = (draws(1000, 4.0, &mut r), draws(1000, 16.0, &mut r));
    let fit = fit_detector(&fc, &fa).unwrap();
    assert!(fit.model.weight > 0.0);
    assert!(detection_rate(&fit.model, &ec, &ea).unwrap() > 0.9);
}

proptest! {
    #[test]
    fn decisions_survive_positive_affine_rescaling(
        seed in any::<u64>(),
        adv_shape in 2.0f64..12.0,
        scale in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (clean, adv) = (draws(60, 4.0, &mut r), draws(60, adv_shape, &mut r));
        let map = |v: &[f64]| v.iter().map(|e| scale * e + shift).collect::<Vec<_>>();
        let base = fit_detector(&clean, &adv).unwrap().model;
        let moved = fit_detector(&map(&clean), &map(&adv)).unwrap().model;
        let probes: Vec<f64> = clean.iter().chain(&adv).copied().collect();
        let mut flips = 0;
        for &e in &probes {
            let margin = (base.weight * e + base.bias).abs();
            if base.is_adversarial(e) != moved.is_adversarial(scale * e + shift) && margin > 1e-6 {
                flips += 1;
            }
        }
        prop_assert_eq!(flips, 0);
    }
}
