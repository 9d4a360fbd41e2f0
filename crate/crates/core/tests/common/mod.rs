#![allow(dead_code)]

//! Reference implementations shared by the integration tests. They are
//! written from the routing description of the circuit and do not call
//! into the library's evaluation code.

use arbiter_puf::apuf::{Envelope, StageDelays};
use arbiter_puf::{ApufInstance, Challenge, OperatingCondition, ResponseBit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which arbiter input a signal currently travels towards.
#[derive(Clone, Copy, PartialEq)]
enum Rail {
    Top,
    Bottom,
}

struct Signal {
    rail: Rail,
    delay: f64,
}

/// Segment delay of one stage at an operating point, looked up by the
/// input rail and the selection bit: input 1 is the top rail, input 2 the
/// bottom, output 3 the top and output 4 the bottom.
fn segment(stage: &StageDelays, from: Rail, bit: u8, dv: f64, dt: f64) -> (Rail, f64) {
    let (to, base, tc, vc) = match (from, bit) {
        (Rail::Top, 1) => (Rail::Top, stage.t13, stage.tc13, stage.vc13),
        (Rail::Bottom, 1) => (Rail::Bottom, stage.t24, stage.tc24, stage.vc24),
        (Rail::Top, 0) => (Rail::Bottom, stage.t14, stage.tc14, stage.vc14),
        (Rail::Bottom, 0) => (Rail::Top, stage.t23, stage.tc23, stage.vc23),
        _ => unreachable!("challenge bits are 0 or 1"),
    };
    (to, base + tc * dt + vc * dv)
}

/// Route both signals through every stage; returns (t_top, t_bottom) at the
/// arbiter.
pub fn trace(stages: &[StageDelays], bits: &[u8], cond: OperatingCondition) -> (f64, f64) {
    let nominal = OperatingCondition::NOMINAL;
    let dv = cond.voltage - nominal.voltage;
    let dt = cond.temperature - nominal.temperature;
    let mut signals = [
        Signal {
            rail: Rail::Top,
            delay: 0.0,
        },
        Signal {
            rail: Rail::Bottom,
            delay: 0.0,
        },
    ];
    for (stage, &bit) in stages.iter().zip(bits) {
        for s in signals.iter_mut() {
            let (to, d) = segment(stage, s.rail, bit, dv, dt);
            s.rail = to;
            s.delay += d;
        }
    }
    let top = signals.iter().find(|s| s.rail == Rail::Top).unwrap().delay;
    let bottom = signals.iter().find(|s| s.rail == Rail::Bottom).unwrap().delay;
    (top, bottom)
}

/// Parity features by direct products: φ_i = ∏_{j ≥ i} (1 − 2 c_j), then 1.
pub fn parity_oracle(bits: &[u8]) -> Vec<f64> {
    let k = bits.len();
    let mut phi: Vec<f64> = (0..k)
        .map(|i| bits[i..].iter().map(|&c| 1.0 - 2.0 * f64::from(c)).product())
        .collect();
    phi.push(1.0);
    phi
}

pub fn all_challenges(k: usize) -> impl Iterator<Item = Challenge> {
    (0..1u64 << k).map(move |idx| Challenge::from_index(idx, k))
}

pub fn random_stages(k: usize, rng: &mut ChaCha8Rng) -> Vec<StageDelays> {
    (0..k)
        .map(|_| {
            let mut d = || 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
            let (t13, t14, t23, t24) = (d(), d(), d(), d());
            let mut small = |scale: f64| scale * (rng.random::<f64>() - 0.5);
            StageDelays {
                t13,
                t14,
                t23,
                t24,
                tc13: small(2e-3),
                tc14: small(2e-3),
                tc23: small(2e-3),
                tc24: small(2e-3),
                vc13: small(0.4),
                vc14: small(0.4),
                vc23: small(0.4),
                vc24: small(0.4),
            }
        })
        .collect()
}

pub fn instance(k: usize, seed: u64) -> ApufInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ApufInstance::new(
        random_stages(k, &mut rng),
        OperatingCondition::NOMINAL,
        0.0,
        Envelope::default(),
    )
    .unwrap()
}

pub const CONDITIONS: [OperatingCondition; 4] = [
    OperatingCondition::NOMINAL,
    OperatingCondition::new(0.96, 25.0),
    OperatingCondition::new(1.44, 65.0),
    OperatingCondition::new(1.32, 45.0),
];

/// Mean of ln(1 + exp(−y·⟨w, φ⟩)) with y = +1 for response 0.
pub fn loss_oracle(samples: &[(Challenge, ResponseBit)], w: &[f64]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|(c, r)| {
            let z: f64 = parity_oracle(c.bits()).iter().zip(w).map(|(f, w)| f * w).sum();
            let y = if *r == ResponseBit::Zero { 1.0 } else { -1.0 };
            (1.0 + (-y * z).exp()).ln()
        })
        .sum();
    total / samples.len() as f64
}

