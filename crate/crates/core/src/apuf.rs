//! Ground-truth simulation of a k-stage arbiter PUF.
//!
//! Each stage holds the four segment delays of a switch box: `t13` and `t24`
//! are used when the selection bit is 1 (signals go straight through), `t14`
//! and `t23` when it is 0 (signals cross). Segment delays vary linearly with
//! the deviation of temperature and supply voltage from the nominal
//! condition. The arbiter answers 0 when the top path is slower
//! (`t_dif = t_top - t_bottom > 0`) and 1 otherwise, ties included.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format tag written into every serialized instance.
pub const INSTANCE_FORMAT: &str = "apuf-instance";
pub const INSTANCE_VERSION: u32 = 1;

/// Ordered selection bits `c_1..c_k`, each 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Challenge(Vec<u8>);

impl Challenge {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("challenge must have at least one bit".into()));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "challenge bit {} has value {}, expected 0 or 1",
                pos + 1,
                bits[pos]
            )));
        }
        Ok(Self(bits))
    }

    /// Challenge number `index` of the `2^k` challenge space, `c_1` being the
    /// most significant bit.
    pub fn from_index(index: u64, k: usize) -> Self {
        assert!((1..=64).contains(&k), "from_index supports 1..=64 stages");
        let bits = (0..k).map(|i| ((index >> (k - 1 - i)) & 1) as u8).collect();
        Self(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hex encoding with `c_1` as the most significant bit, left padded with
    /// zero bits to a whole number of nibbles.
    pub fn to_hex(&self) -> String {
        let k = self.0.len();
        let pad = (4 - k % 4) % 4;
        let padded: Vec<u8> = std::iter::repeat_n(0u8, pad).chain(self.0.iter().copied()).collect();
        padded
            .chunks(4)
            .map(|nib| {
                let v = nib.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn from_hex(hex: &str, k: usize) -> Result<Self> {
        let digits = k.div_ceil(4);
        if hex.len() != digits {
            return Err(Error::InvalidArgument(format!(
                "challenge hex `{hex}` has {} digits, expected {digits} for k = {k}",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::InvalidArgument(format!("invalid hex digit `{ch}`")))?;
            bits.extend((0..4).rev().map(|s| ((v >> s) & 1) as u8));
        }
        let pad = digits * 4 - k;
        if bits[..pad].iter().any(|&b| b != 0) {
            return Err(Error::InvalidArgument(format!(
                "challenge hex `{hex}` has non-zero padding bits for k = {k}"
            )));
        }
        Self::new(bits.split_off(pad))
    }
}

/// Uniform random challenge of `k` independent bits.
pub fn random_challenge<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Challenge {
    assert!(k >= 1, "stage count must be at least 1");
    Challenge((0..k).map(|_| rng.random::<bool>() as u8).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ResponseBit {
    Zero,
    One,
}

impl ResponseBit {
    /// Arbiter decision for a delay difference: 0 iff `t_dif > 0`.
    pub fn from_tdif(tdif: f64) -> Self {
        if tdif > 0.0 {
            Self::Zero
        } else {
            Self::One
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Self::Zero => 0,
            Self::One => 1,
        }
    }
}

impl From<ResponseBit> for u8 {
    fn from(bit: ResponseBit) -> u8 {
        bit.as_u8()
    }
}

impl TryFrom<u8> for ResponseBit {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Zero),
            1 => Ok(Self::One),
            other => Err(Error::InvalidArgument(format!("response bit must be 0 or 1, got {other}"))),
        }
    }
}

impl fmt::Display for ResponseBit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Supply voltage (V) and temperature (°C).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    pub voltage: f64,
    pub temperature: f64,
}

impl OperatingCondition {
    pub const fn new(voltage: f64, temperature: f64) -> Self {
        Self { voltage, temperature }
    }

    /// 1.20 V, 25 °C.
    pub const NOMINAL: Self = Self::new(1.20, 25.0);
}

impl fmt::Display for OperatingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} V, {} °C)", self.voltage, self.temperature)
    }
}

/// Closed voltage and temperature ranges an instance may be operated in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub voltage: [f64; 2],
    pub temperature: [f64; 2],
}

impl Envelope {
    pub fn contains(&self, cond: OperatingCondition) -> bool {
        (self.voltage[0]..=self.voltage[1]).contains(&cond.voltage)
            && (self.temperature[0]..=self.temperature[1]).contains(&cond.temperature)
    }

    pub fn corners(&self) -> [OperatingCondition; 4] {
        let [v0, v1] = self.voltage;
        let [t0, t1] = self.temperature;
        [
            OperatingCondition::new(v0, t0),
            OperatingCondition::new(v0, t1),
            OperatingCondition::new(v1, t0),
            OperatingCondition::new(v1, t1),
        ]
    }
}

impl Default for Envelope {
    fn default() -> Self {
        Self {
            voltage: [0.96, 1.44],
            temperature: [25.0, 65.0],
        }
    }
}

/// Segment delays of one stage at a concrete condition, in ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentDelays {
    pub t13: f64,
    pub t14: f64,
    pub t23: f64,
    pub t24: f64,
}

impl SegmentDelays {
    pub fn as_array(&self) -> [f64; 4] {
        [self.t13, self.t14, self.t23, self.t24]
    }
}

/// Base delays at the nominal condition (ns) with linear temperature (ns/°C)
/// and voltage (ns/V) coefficients per segment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageDelays {
    pub t13: f64,
    pub t14: f64,
    pub t23: f64,
    pub t24: f64,
    pub tc13: f64,
    pub tc14: f64,
    pub tc23: f64,
    pub tc24: f64,
    pub vc13: f64,
    pub vc14: f64,
    pub vc23: f64,
    pub vc24: f64,
}

impl StageDelays {
    /// Stage with fixed delays and no environmental dependence.
    pub fn constant(t13: f64, t14: f64, t23: f64, t24: f64) -> Self {
        Self {
            t13,
            t14,
            t23,
            t24,
            ..Self::default()
        }
    }

    /// `t + tc·(T − T_nom) + vc·(V − V_nom)` for each segment. No envelope check.
    pub fn effective(&self, cond: OperatingCondition, nominal: OperatingCondition) -> SegmentDelays {
        let dt = cond.temperature - nominal.temperature;
        let dv = cond.voltage - nominal.voltage;
        SegmentDelays {
            t13: self.t13 + self.tc13 * dt + self.vc13 * dv,
            t14: self.t14 + self.tc14 * dt + self.vc14 * dv,
            t23: self.t23 + self.tc23 * dt + self.vc23 * dv,
            t24: self.t24 + self.tc24 * dt + self.vc24 * dv,
        }
    }

    /// Multiply every delay and coefficient by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            t13: self.t13 * factor,
            t14: self.t14 * factor,
            t23: self.t23 * factor,
            t24: self.t24 * factor,
            tc13: self.tc13 * factor,
            tc14: self.tc14 * factor,
            tc23: self.tc23 * factor,
            tc24: self.tc24 * factor,
            vc13: self.vc13 * factor,
            vc14: self.vc14 * factor,
            vc23: self.vc23 * factor,
            vc24: self.vc24 * factor,
        }
    }
}

/// Parameters for drawing a random (non-synthetic) instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInstanceParams {
    pub delay_mean: f64,
    pub delay_sd: f64,
    pub temp_coeff_mean: f64,
    pub temp_coeff_sd: f64,
    pub volt_coeff_mean: f64,
    pub volt_coeff_sd: f64,
    pub noise_sigma: f64,
}

impl Default for RandomInstanceParams {
    fn default() -> Self {
        // Coefficient dispersion relative to delay dispersion mirrors the RO
        // fixture defaults in `synth`.
        Self {
            delay_mean: 1.0,
            delay_sd: 0.05,
            temp_coeff_mean: 1.0e-3,
            temp_coeff_sd: 1.75e-4,
            volt_coeff_mean: -0.2,
            volt_coeff_sd: 0.081,
            noise_sigma: 0.0,
        }
    }
}

/// A simulated arbiter PUF. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ApufInstance {
    stages: Vec<StageDelays>,
    nominal: OperatingCondition,
    noise_sigma: f64,
    envelope: Envelope,
}

impl ApufInstance {
    pub fn new(
        stages: Vec<StageDelays>,
        nominal: OperatingCondition,
        noise_sigma: f64,
        envelope: Envelope,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidInstance("an APUF needs at least one stage".into()));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidInstance(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        if !(envelope.voltage[0] <= envelope.voltage[1] && envelope.temperature[0] <= envelope.temperature[1]) {
            return Err(Error::InvalidInstance(format!("empty envelope {envelope:?}")));
        }
        if !envelope.contains(nominal) {
            return Err(Error::InvalidInstance(format!("nominal condition {nominal} outside envelope")));
        }
        for (i, stage) in stages.iter().enumerate() {
            let base = [stage.t13, stage.t14, stage.t23, stage.t24];
            if base.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
                return Err(Error::InvalidInstance(format!("stage {} has a non-positive base delay", i + 1)));
            }
            // Linear in (V, T): the minimum over the envelope sits at a corner.
            for corner in envelope.corners() {
                if stage.effective(corner, nominal).as_array().iter().any(|&t| !(t > 0.0)) {
                    return Err(Error::InvalidInstance(format!(
                        "stage {} has a non-positive effective delay at {corner}",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self {
            stages,
            nominal,
            noise_sigma,
            envelope,
        })
    }

    /// Draw an instance with i.i.d. Gaussian segment parameters; base delays
    /// are resampled until positive.
    pub fn random<R: Rng + ?Sized>(k: usize, params: &RandomInstanceParams, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("stage count must be at least 1".into()));
        }
        let normal = |mean: f64, sd: f64| {
            Normal::new(mean, sd).map_err(|e| Error::InvalidArgument(format!("bad distribution parameters: {e}")))
        };
        let base = normal(params.delay_mean, params.delay_sd)?;
        let tc = normal(params.temp_coeff_mean, params.temp_coeff_sd)?;
        let vc = normal(params.volt_coeff_mean, params.volt_coeff_sd)?;
        let positive = |rng: &mut R| loop {
            let t: f64 = base.sample(rng);
            if t > 0.0 {
                break t;
            }
        };
        let stages = (0..k)
            .map(|_| StageDelays {
                t13: positive(rng),
                t14: positive(rng),
                t23: positive(rng),
                t24: positive(rng),
                tc13: tc.sample(rng),
                tc14: tc.sample(rng),
                tc23: tc.sample(rng),
                tc24: tc.sample(rng),
                vc13: vc.sample(rng),
                vc14: vc.sample(rng),
                vc23: vc.sample(rng),
                vc24: vc.sample(rng),
            })
            .collect();
        Self::new(stages, OperatingCondition::NOMINAL, params.noise_sigma, Envelope::default())
    }

    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[StageDelays] {
        &self.stages
    }

    pub fn nominal(&self) -> OperatingCondition {
        self.nominal
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn envelope(&self) -> Envelope {
        self.envelope
    }

    pub fn with_noise_sigma(&self, noise_sigma: f64) -> Result<Self> {
        Self::new(self.stages.clone(), self.nominal, noise_sigma, self.envelope)
    }

    pub fn with_envelope(&self, envelope: Envelope) -> Result<Self> {
        Self::new(self.stages.clone(), self.nominal, self.noise_sigma, envelope)
    }

    fn check_condition(&self, cond: OperatingCondition) -> Result<()> {
        if self.envelope.contains(cond) {
            Ok(())
        } else {
            Err(Error::EnvelopeViolation(cond))
        }
    }

    fn check_challenge(&self, c: &Challenge) -> Result<()> {
        if c.len() == self.k() {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.k(),
                found: c.len(),
            })
        }
    }

    pub fn effective_stage_delays(&self, stage: usize, cond: OperatingCondition) -> Result<SegmentDelays> {
        self.check_condition(cond)?;
        let s = self.stages.get(stage).ok_or_else(|| {
            Error::InvalidArgument(format!("stage index {stage} out of range for k = {}", self.k()))
        })?;
        Ok(s.effective(cond, self.nominal))
    }

    /// Resolve every segment delay at `cond` once, for repeated evaluation.
    pub fn at(&self, cond: OperatingCondition) -> Result<ResolvedApuf<'_>> {
        self.check_condition(cond)?;
        Ok(ResolvedApuf {
            apuf: self,
            delays: self.stages.iter().map(|s| s.effective(cond, self.nominal)).collect(),
        })
    }

    /// Noiseless `(t_top, t_bottom)` arrival times.
    pub fn path_delays(&self, c: &Challenge, cond: OperatingCondition) -> Result<(f64, f64)> {
        self.check_challenge(c)?;
        Ok(self.at(cond)?.path_delays_unchecked(c))
    }

    /// Noiseless `t_top − t_bottom`.
    pub fn delay_difference(&self, c: &Challenge, cond: OperatingCondition) -> Result<f64> {
        let (top, bottom) = self.path_delays(c, cond)?;
        Ok(top - bottom)
    }

    /// One noisy arbiter evaluation.
    pub fn evaluate<R: Rng + ?Sized>(&self, c: &Challenge, cond: OperatingCondition, rng: &mut R) -> Result<ResponseBit> {
        let tdif = self.delay_difference(c, cond)?;
        Ok(noisy_response(tdif, self.noise_sigma, rng))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = InstanceDocument {
            format: INSTANCE_FORMAT.to_string(),
            version: INSTANCE_VERSION,
            k: self.k(),
            nominal: self.nominal,
            noise_sigma: self.noise_sigma,
            envelope: self.envelope,
            stages: self.stages.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceDocument = serde_json::from_str(text)?;
        if doc.format != INSTANCE_FORMAT {
            return Err(Error::Schema(format!("expected format `{INSTANCE_FORMAT}`, found `{}`", doc.format)));
        }
        if doc.version != INSTANCE_VERSION {
            return Err(Error::Schema(format!("unsupported instance version {}", doc.version)));
        }
        if doc.k != doc.stages.len() {
            return Err(Error::Schema(format!("k = {} but {} stages listed", doc.k, doc.stages.len())));
        }
        Self::new(doc.stages, doc.nominal, doc.noise_sigma, doc.envelope)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDocument {
    format: String,
    version: u32,
    k: usize,
    nominal: OperatingCondition,
    noise_sigma: f64,
    envelope: Envelope,
    stages: Vec<StageDelays>,
}

/// An instance with segment delays resolved at one operating condition.
#[derive(Debug, Clone)]
pub struct ResolvedApuf<'a> {
    apuf: &'a ApufInstance,
    delays: Vec<SegmentDelays>,
}

impl ResolvedApuf<'_> {
    fn path_delays_unchecked(&self, c: &Challenge) -> (f64, f64) {
        let mut top = 0.0;
        let mut bottom = 0.0;
        for (d, &bit) in self.delays.iter().zip(c.bits()) {
            if bit == 1 {
                top += d.t13;
                bottom += d.t24;
            } else {
                (top, bottom) = (bottom + d.t23, top + d.t14);
            }
        }
        (top, bottom)
    }

    pub fn delay_difference(&self, c: &Challenge) -> Result<f64> {
        self.apuf.check_challenge(c)?;
        let (top, bottom) = self.path_delays_unchecked(c);
        Ok(top - bottom)
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, c: &Challenge, rng: &mut R) -> Result<ResponseBit> {
        Ok(noisy_response(self.delay_difference(c)?, self.apuf.noise_sigma, rng))
    }

    pub fn noise_sigma(&self) -> f64 {
        self.apuf.noise_sigma
    }
}

/// Arbiter decision after independent jitter `N(0, sigma²)` on each path.
pub fn noisy_response<R: Rng + ?Sized>(tdif: f64, sigma: f64, rng: &mut R) -> ResponseBit {
    if sigma == 0.0 {
        return ResponseBit::from_tdif(tdif);
    }
    let top: f64 = rng.sample(StandardNormal);
    let bottom: f64 = rng.sample(StandardNormal);
    ResponseBit::from_tdif(tdif + sigma * (top - bottom))
}
