//! Sampling behaviour of the filter and evaluation routines against
//! Gaussian reference values.

use arbiter_puf::eval::{ber_sweep, calibrate_noise, measure_ber, substream, ConditionGrid};
use arbiter_puf::filter::{crp_loss, crp_loss_curve, generate_reliable, loss_to_delta};
use arbiter_puf::{
    random_challenge, randomness, ApufInstance, Challenge, DelayModel, OperatingCondition, RandomInstanceParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

/// 64 Gaussian stage weights with the given bias, normalized to unit spread.
fn gaussian_model(bias: f64, seed: u64) -> DelayModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter_mut().for_each(|x| *x /= norm);
    w.push(bias);
    // Parity features of uniform challenges are independent fair signs,
    // so the stage part has unit variance exactly.
    DelayModel::with_scale(w, 1.0).unwrap()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

#[test]
fn crp_loss_matches_gaussian_two_sided_tail() {
    let m = gaussian_model(0.0, 1);
    let expected = 2.0 * std_normal().cdf(1.88) - 1.0;
    let loss = crp_loss(&m, 1.88, 200_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!((loss - expected).abs() < 0.01, "loss {loss}, Gaussian {expected}");
    assert!((loss - 0.94).abs() < 0.01);
}

#[test]
fn loss_quantile_matches_gaussian_quantile() {
    let m = gaussian_model(0.0, 3);
    let expected = std_normal().inverse_cdf(0.5 + 0.94 / 2.0);
    let d = loss_to_delta(&m, 0.94, 200_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!((d - expected).abs() < 0.03, "delta {d}, Gaussian {expected}");
}

#[test]
fn candidates_examined_scale_with_loss() {
    let m = gaussian_model(0.0, 5);
    let d = loss_to_delta(&m, 0.94, 200_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let batch = generate_reliable(&m, d, 600, &mut ChaCha8Rng::seed_from_u64(7), None).unwrap();
    assert_eq!(batch.len(), 600);
    // 600 / 0.06 = 10,000 expected; four negative-binomial deviations ≈ 1,600.
    assert!((8_400..=11_600).contains(&batch.candidates_examined), "{}", batch.candidates_examined);
}

#[test]
fn crp_loss_is_non_decreasing() {
    let m = gaussian_model(0.05, 8);
    let deltas: Vec<f64> = (0..=12).map(|i| f64::from(i) * 0.25).collect();
    let losses = crp_loss_curve(&m, &deltas, 50_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(losses.windows(2).all(|w| w[0] <= w[1]), "{losses:?}");
    assert_eq!(losses[0], 0.0);
}

#[test]
fn unbiased_model_keeps_balanced_selection() {
    let m = gaussian_model(0.0, 10);
    for i in 0..=8u32 {
        let dt = f64::from(i) * 0.25;
        let batch = generate_reliable(&m, dt, 100_000, &mut substream(11, u64::from(i)), None).unwrap();
        let ones = randomness(&batch.predicted_bits()).unwrap();
        assert!((0.48..=0.52).contains(&ones), "delta_t {dt}: fraction of ones {ones}");
    }
}

/// With normalized stage part `s ~ N(0, 1)` and bias `b`, a challenge
/// yields 1 when `s + b < 0`; among `|s + b| > Δ` that happens with
/// probability `Φ(−Δ − b) / (Φ(−Δ − b) + Φ(−Δ + b))`.
#[test]
fn biased_model_selection_follows_gaussian_prediction() {
    let b = 0.1;
    let m = gaussian_model(b, 12);
    let n = std_normal();
    for i in 0..=8u32 {
        let dt = f64::from(i) * 0.25;
        let lower = n.cdf(-dt - b);
        let expected = lower / (lower + n.cdf(-dt + b));
        let batch = generate_reliable(&m, dt, 50_000, &mut substream(13, u64::from(i)), None).unwrap();
        let ones = randomness(&batch.predicted_bits()).unwrap();
        assert!((ones - expected).abs() < 0.01, "delta_t {dt}: {ones} vs {expected}");
    }
}

fn random_instance(noise: f64, seed: u64) -> ApufInstance {
    let params = RandomInstanceParams {
        noise_sigma: noise,
        ..RandomInstanceParams::default()
    };
    ApufInstance::random(64, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn calibration_reaches_higher_nominal_target() {
    let apuf = random_instance(0.0, 14);
    let cal = calibrate_noise(&apuf, 0.0499, 0.001, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    assert!(cal.noise_sigma() > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cs: Vec<Challenge> = (0..40_000).map(|_| random_challenge(64, &mut rng)).collect();
    let n = OperatingCondition::NOMINAL;
    let ber = measure_ber(&cal, &cs, n, n, 11, &mut rng).unwrap().rate();
    assert!((ber - 0.0499).abs() <= 0.002, "{ber}");
}

#[test]
fn filtered_ber_never_exceeds_unfiltered() {
    let apuf = random_instance(0.0, 17);
    let cal = calibrate_noise(&apuf, 0.022, 0.001, &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
    let m = DelayModel::from_instance(&cal, OperatingCondition::NOMINAL)
        .unwrap()
        .normalize(50_000, &mut ChaCha8Rng::seed_from_u64(19))
        .unwrap();
    let deltas: Vec<f64> = (0..=8).map(|i| f64::from(i) * 0.25).collect();
    let sweep = ber_sweep(&cal, &m, &deltas, &ConditionGrid::wide(), 50_000, 11, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
    let base = sweep[0].worst_counts();
    for b in &sweep[1..] {
        let slack = 3.0 * base.std_error();
        assert!(b.worst.ber.rate <= base.rate() + slack, "delta_t {}: {} vs {}", b.delta_t, b.worst.ber.rate, base.rate());
        assert!(b.pooled.rate <= sweep[0].pooled.rate);
    }
}
