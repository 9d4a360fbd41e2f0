//! Independent reference implementations checked against the library:
//! an explicit signal-routing path tracer enumerated over every challenge
//! of small instances, direct parity products, a separately written
//! logistic loss with finite-difference gradients, and property tests for
//! the model and filter invariants.

use arbiter_puf::apuf::{Envelope, StageDelays};
use arbiter_puf::filter::select;
use arbiter_puf::model::{
    feature_transform, majority, stage_differences, weights_from_instance, weights_from_stage_differences,
    LogisticProblem,
};
use arbiter_puf::{ApufInstance, Challenge, DelayModel, FilterDecision, OperatingCondition, ResponseBit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{all_challenges, instance, loss_oracle, parity_oracle, trace, CONDITIONS};

#[test]
fn path_delays_match_tracer_exhaustively() {
    for k in 1..=6 {
        for seed in 0..3 {
            let apuf = instance(k, 100 * k as u64 + seed);
            for cond in CONDITIONS {
                for c in all_challenges(k) {
                    let (top, bottom) = trace(apuf.stages(), c.bits(), cond);
                    let (t, b) = apuf.path_delays(&c, cond).unwrap();
                    assert!((t - top).abs() < 1e-12 && (b - bottom).abs() < 1e-12, "k={k} {c:?} {cond}");
                    let d = apuf.delay_difference(&c, cond).unwrap();
                    assert!((d - (top - bottom)).abs() < 1e-12);
                    let noiseless = apuf.evaluate(&c, cond, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                    let expected = if top - bottom > 0.0 { ResponseBit::Zero } else { ResponseBit::One };
                    assert_eq!(noiseless, expected);
                }
            }
        }
    }
}

#[test]
fn parity_prediction_matches_tracer_exhaustively() {
    for k in 1..=6 {
        for seed in 0..3 {
            let apuf = instance(k, 7 + 100 * k as u64 + seed);
            for cond in CONDITIONS {
                let model = DelayModel::from_instance(&apuf, cond).unwrap();
                for c in all_challenges(k) {
                    let phi = parity_oracle(c.bits());
                    assert_eq!(feature_transform(&c), phi);
                    let (top, bottom) = trace(apuf.stages(), c.bits(), cond);
                    let linear: f64 = model.weights().iter().zip(&phi).map(|(w, f)| w * f).sum();
                    assert!((linear - (top - bottom)).abs() < 1e-12, "k={k} {c:?}");
                    let predicted = model.predict_tdif(&c).unwrap();
                    assert!((predicted - (top - bottom)).abs() < 1e-12);
                    let expected = if top - bottom > 0.0 { ResponseBit::Zero } else { ResponseBit::One };
                    assert_eq!(model.predict_response(&c).unwrap(), expected);
                }
            }
        }
    }
}

#[test]
fn filter_decision_matches_tracer_exhaustively() {
    for k in 1..=6 {
        let apuf = instance(k, 31 + k as u64);
        let model = DelayModel::from_instance(&apuf, OperatingCondition::NOMINAL).unwrap();
        let spread = all_challenges(k)
            .map(|c| model.predict_tdif(&c).unwrap().abs())
            .fold(0.0, f64::max);
        for frac in [0.0, 0.1, 0.3, 0.6, 0.9, 1.1] {
            let delta = frac * spread;
            for c in all_challenges(k) {
                let (top, bottom) = trace(apuf.stages(), c.bits(), OperatingCondition::NOMINAL);
                let t = top - bottom;
                match select(&c, &model, delta).unwrap() {
                    FilterDecision::Selected { predicted, .. } => {
                        assert!(t.abs() > delta, "k={k} {c:?} t={t} delta={delta}");
                        assert_eq!(predicted, if t > 0.0 { ResponseBit::Zero } else { ResponseBit::One });
                    }
                    FilterDecision::Discarded { .. } => assert!(t.abs() <= delta, "k={k} {c:?}"),
                }
            }
        }
    }
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [3usize, 6, 16] {
        let samples: Vec<(Challenge, ResponseBit)> = (0..300)
            .map(|_| {
                let c = arbiter_puf::random_challenge(k, &mut rng);
                let r = if rng.random::<bool>() { ResponseBit::One } else { ResponseBit::Zero };
                (c, r)
            })
            .collect();
        let problem = LogisticProblem::new(k, &samples).unwrap();
        for _ in 0..3 {
            let w: Vec<f64> = (0..=k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let (loss, grad) = problem.loss_and_gradient(&w);
            assert!((loss - loss_oracle(&samples, &w)).abs() < 1e-12);
            let h = 1e-6;
            let fd: Vec<f64> = (0..=k)
                .map(|i| {
                    let mut plus = w.clone();
                    let mut minus = w.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    (loss_oracle(&samples, &plus) - loss_oracle(&samples, &minus)) / (2.0 * h)
                })
                .collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&fd);
            assert!(rel < 1e-5, "k={k}: relative gradient error {rel}");
            for (g, f) in grad.iter().zip(&fd) {
                assert!((g - f).abs() <= 1e-5 * f.abs().max(1e-3), "{g} vs {f}");
            }
        }
    }
}

fn arb_challenge(max_k: usize) -> impl Strategy<Value = Challenge> {
    prop::collection::vec(0u8..=1, 1..=max_k).prop_map(|bits| Challenge::new(bits).unwrap())
}

fn arb_stage() -> impl Strategy<Value = StageDelays> {
    (0.9f64..1.1, 0.9f64..1.1, 0.9f64..1.1, 0.9f64..1.1).prop_map(|(a, b, c, d)| StageDelays::constant(a, b, c, d))
}

fn arb_instance(max_k: usize) -> impl Strategy<Value = ApufInstance> {
    prop::collection::vec(arb_stage(), 1..=max_k).prop_map(|stages| {
        ApufInstance::new(stages, OperatingCondition::NOMINAL, 0.0, Envelope::default()).unwrap()
    })
}

fn instance_and_challenge(max_k: usize) -> impl Strategy<Value = (ApufInstance, Challenge)> {
    arb_instance(max_k).prop_flat_map(|apuf| {
        let k = apuf.k();
        (Just(apuf), prop::collection::vec(0u8..=1, k).prop_map(|b| Challenge::new(b).unwrap()))
    })
}

proptest! {
    #[test]
    fn features_are_signed_suffix_parities(c in arb_challenge(64)) {
        let phi = feature_transform(&c);
        let k = c.len();
        prop_assert_eq!(phi.len(), k + 1);
        prop_assert_eq!(phi[k], 1.0);
        for i in 0..k {
            prop_assert_eq!(phi[i], phi[i + 1] * (1.0 - 2.0 * f64::from(c.bits()[i])));
        }
    }

    #[test]
    fn linear_model_reproduces_delay_difference((apuf, c) in instance_and_challenge(24)) {
        let w = weights_from_instance(&apuf, OperatingCondition::NOMINAL).unwrap();
        let z: f64 = w.iter().zip(feature_transform(&c)).map(|(w, f)| w * f).sum();
        let (top, bottom) = trace(apuf.stages(), c.bits(), OperatingCondition::NOMINAL);
        prop_assert!((z - (top - bottom)).abs() < 1e-10);
    }

    #[test]
    fn mirrored_instance_negates_delay_difference((apuf, c) in instance_and_challenge(24)) {
        let mirrored: Vec<StageDelays> = apuf
            .stages()
            .iter()
            .map(|s| StageDelays::constant(s.t24, s.t23, s.t14, s.t13))
            .collect();
        let mirrored = ApufInstance::new(mirrored, OperatingCondition::NOMINAL, 0.0, Envelope::default()).unwrap();
        let a = apuf.delay_difference(&c, OperatingCondition::NOMINAL).unwrap();
        let b = mirrored.delay_difference(&c, OperatingCondition::NOMINAL).unwrap();
        prop_assert!((a + b).abs() < 1e-10);
    }

    #[test]
    fn stage_split_reproduces_weights(w in prop::collection::vec(-1.0f64..1.0, 2..40)) {
        let split = stage_differences(&w);
        let straight: Vec<f64> = split.iter().map(|s| s.0).collect();
        let cross: Vec<f64> = split.iter().map(|s| s.1).collect();
        let back = weights_from_stage_differences(&straight, &cross);
        for (a, b) in back.iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_is_monotone_in_threshold(
        w in prop::collection::vec(-1.0f64..1.0, 9),
        bits in prop::collection::vec(0u8..=1, 8),
        d1 in 0.0f64..3.0,
        d2 in 0.0f64..3.0,
    ) {
        let model = DelayModel::from_weights(w).unwrap();
        let c = Challenge::new(bits).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let at_hi = select(&c, &model, hi).unwrap();
        let at_lo = select(&c, &model, lo).unwrap();
        prop_assert!(!at_hi.is_selected() || at_lo.is_selected());
        prop_assert_eq!(at_lo.is_selected(), at_lo.tdif().abs() > lo);
    }

    #[test]
    fn scaling_weights_keeps_responses(
        w in prop::collection::vec(-1.0f64..1.0, 13),
        bits in prop::collection::vec(0u8..=1, 12),
        factor in 0.01f64..100.0,
    ) {
        let c = Challenge::new(bits).unwrap();
        let a = DelayModel::from_weights(w.clone()).unwrap();
        let b = DelayModel::from_weights(w.iter().map(|x| x * factor).collect()).unwrap();
        prop_assert_eq!(a.predict_response(&c).unwrap(), b.predict_response(&c).unwrap());
    }

    #[test]
    fn majority_of_odd_votes_is_symmetric(votes in prop::collection::vec(any::<bool>(), 1..30usize)) {
        let bits: Vec<ResponseBit> = votes.iter().map(|&v| if v { ResponseBit::One } else { ResponseBit::Zero }).collect();
        let flipped: Vec<ResponseBit> = votes.iter().map(|&v| if v { ResponseBit::Zero } else { ResponseBit::One }).collect();
        let ones = votes.iter().filter(|&&v| v).count();
        if 2 * ones == votes.len() {
            prop_assert_eq!(majority(&bits), ResponseBit::One);
            prop_assert_eq!(majority(&flipped), ResponseBit::One);
        } else {
            prop_assert_ne!(majority(&bits), majority(&flipped));
        }
    }

    #[test]
    fn hex_round_trip(c in arb_challenge(130)) {
        prop_assert_eq!(Challenge::from_hex(&c.to_hex(), c.len()).unwrap(), c);
    }
}
