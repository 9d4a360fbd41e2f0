//! Reliability evaluation: BER against a nominal reference, noise
//! calibration, BER@Δt over condition grids, CRP loss and response balance.
//!
//! Every challenge gets its own random stream derived from a run seed and
//! the challenge's position, so results do not depend on how the work is
//! split across threads.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apuf::{random_challenge, ApufInstance, Challenge, OperatingCondition, ResolvedApuf, ResponseBit};
use crate::error::{Error, Result};
use crate::filter::{crp_loss_curve, generate_reliable};
use crate::model::{majority, DelayModel};

pub const REPORT_FORMAT: &str = "apuf-eval-report";
pub const REPORT_VERSION: u32 = 1;

/// Independent stream `stream` of the run seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionGrid {
    pub conditions: Vec<OperatingCondition>,
    pub nominal_index: usize,
}

impl ConditionGrid {
    pub fn new(conditions: Vec<OperatingCondition>, nominal_index: usize) -> Result<Self> {
        if nominal_index >= conditions.len() {
            return Err(Error::InvalidArgument(format!(
                "nominal index {nominal_index} out of range for {} conditions",
                conditions.len()
            )));
        }
        Ok(Self {
            conditions,
            nominal_index,
        })
    }

    /// Nominal plus a voltage sweep at the nominal temperature and a
    /// temperature sweep at the nominal voltage.
    pub fn sweeps(nominal: OperatingCondition, voltages: &[f64], temperatures: &[f64]) -> Self {
        let mut conditions = vec![nominal];
        conditions.extend(
            voltages
                .iter()
                .filter(|&&v| v != nominal.voltage)
                .map(|&v| OperatingCondition::new(v, nominal.temperature)),
        );
        conditions.extend(
            temperatures
                .iter()
                .filter(|&&t| t != nominal.temperature)
                .map(|&t| OperatingCondition::new(nominal.voltage, t)),
        );
        Self {
            conditions,
            nominal_index: 0,
        }
    }

    /// ±20 % supply voltage and 25–65 °C around (1.20 V, 25 °C).
    pub fn wide() -> Self {
        Self::sweeps(
            OperatingCondition::NOMINAL,
            &[0.96, 1.08, 1.20, 1.32, 1.44],
            &[25.0, 35.0, 45.0, 55.0, 65.0],
        )
    }

    /// ±10 % supply voltage and 25–65 °C.
    pub fn narrow() -> Self {
        Self::sweeps(OperatingCondition::NOMINAL, &[1.08, 1.20, 1.32], &[25.0, 35.0, 45.0, 55.0, 65.0])
    }

    pub fn nominal_only() -> Self {
        Self::sweeps(OperatingCondition::NOMINAL, &[], &[])
    }

    pub fn nominal(&self) -> OperatingCondition {
        self.conditions[self.nominal_index]
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn validate(&self, apuf: &ApufInstance) -> Result<()> {
        match self.conditions.iter().find(|c| !apuf.envelope().contains(**c)) {
            Some(c) => Err(Error::EnvelopeViolation(*c)),
            None => Ok(()),
        }
    }
}

/// Mismatch count out of a number of re-evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BerCount {
    pub errors: u64,
    pub trials: u64,
}

impl BerCount {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.errors as f64 / self.trials as f64
        }
    }

    /// Binomial standard deviation of the rate.
    pub fn std_error(&self) -> f64 {
        let p = self.rate();
        (p * (1.0 - p) / self.trials.max(1) as f64).sqrt()
    }

    pub fn estimate(&self) -> RateEstimate {
        RateEstimate::from_counts(*self)
    }
}

impl std::ops::Add for BerCount {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            errors: self.errors + rhs.errors,
            trials: self.trials + rhs.trials,
        }
    }
}

impl std::iter::Sum for BerCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// A rate with its 95 % Wilson half-width and one-sided 95 % upper bound.
/// With zero errors the bound is the exact `1 − 0.05^(1/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub errors: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci95_radius: f64,
    pub upper95: f64,
}

impl RateEstimate {
    pub fn from_counts(c: BerCount) -> Self {
        const Z: f64 = 1.959_963_984_540_054;
        const Z_ONE_SIDED: f64 = 1.644_853_626_951_472;
        let n = c.trials as f64;
        if c.trials == 0 {
            return Self {
                errors: 0,
                trials: 0,
                rate: 0.0,
                ci95_radius: 1.0,
                upper95: 1.0,
            };
        }
        let p = c.rate();
        let wilson = |z: f64| {
            let denom = 1.0 + z * z / n;
            let center = (p + z * z / (2.0 * n)) / denom;
            let radius = z / denom * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
            (center, radius)
        };
        let (_, radius) = wilson(Z);
        let upper95 = if c.errors == 0 {
            1.0 - 0.05f64.powf(1.0 / n)
        } else {
            let (center, r) = wilson(Z_ONE_SIDED);
            (center + r).min(1.0)
        };
        Self {
            errors: c.errors,
            trials: c.trials,
            rate: p,
            ci95_radius: radius,
            upper95,
        }
    }
}

/// Reference at one condition, re-evaluations at several others.
struct Evaluator<'a> {
    reference: ResolvedApuf<'a>,
    tests: Vec<ResolvedApuf<'a>>,
    repeats: usize,
}

impl<'a> Evaluator<'a> {
    fn new(apuf: &'a ApufInstance, reference: OperatingCondition, tests: &[OperatingCondition], repeats: usize) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        Ok(Self {
            reference: apuf.at(reference)?,
            tests: tests.iter().map(|&c| apuf.at(c)).collect::<Result<_>>()?,
            repeats,
        })
    }

    /// Majority reference bit and mismatch counts per test condition.
    fn run<R: Rng>(&self, c: &Challenge, rng: &mut R) -> Result<(ResponseBit, Vec<u64>)> {
        let reference: Vec<ResponseBit> = (0..self.repeats)
            .map(|_| self.reference.evaluate(c, rng))
            .collect::<Result<_>>()?;
        let reference = majority(&reference);
        let mismatches = self
            .tests
            .iter()
            .map(|t| {
                let tdif = t.delay_difference(c)?;
                Ok((0..self.repeats)
                    .filter(|_| crate::apuf::noisy_response(tdif, t.noise_sigma(), rng) != reference)
                    .count() as u64)
            })
            .collect::<Result<_>>()?;
        Ok((reference, mismatches))
    }
}

/// Reference = majority of `repeats` evaluations at `ref_cond`; each of
/// `repeats` re-evaluations at `test_cond` is one trial.
pub fn measure_ber<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    challenges: &[Challenge],
    ref_cond: OperatingCondition,
    test_cond: OperatingCondition,
    repeats: usize,
    rng: &mut R,
) -> Result<BerCount> {
    Ok(measure_ber_grid(apuf, challenges, ref_cond, &[test_cond], repeats, rng)?[0])
}

/// `measure_ber` against several test conditions sharing one reference.
pub fn measure_ber_grid<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    challenges: &[Challenge],
    ref_cond: OperatingCondition,
    test_conds: &[OperatingCondition],
    repeats: usize,
    rng: &mut R,
) -> Result<Vec<BerCount>> {
    let eval = Evaluator::new(apuf, ref_cond, test_conds, repeats)?;
    let seed = rng.next_u64();
    let per_challenge: Vec<Vec<u64>> = challenges
        .par_iter()
        .enumerate()
        .map(|(i, c)| eval.run(c, &mut substream(seed, i as u64)).map(|(_, m)| m))
        .collect::<Result<_>>()?;
    let trials = (challenges.len() * repeats) as u64;
    Ok((0..test_conds.len())
        .map(|j| BerCount {
            errors: per_challenge.iter().map(|m| m[j]).sum(),
            trials,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub n_challenges: usize,
    pub repeats: usize,
    pub max_iterations: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_challenges: 100_000,
            repeats: 11,
            max_iterations: 60,
        }
    }
}

pub fn calibrate_noise<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    target_nominal_ber: f64,
    tolerance: f64,
    rng: &mut R,
) -> Result<ApufInstance> {
    calibrate_noise_with(apuf, target_nominal_ber, tolerance, &CalibrationConfig::default(), rng)
}

/// Bisect `noise_sigma` until the nominal BER lies within `tolerance` of
/// the target. Every probe reuses the same challenges and noise streams.
pub fn calibrate_noise_with<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    target: f64,
    tolerance: f64,
    cfg: &CalibrationConfig,
    rng: &mut R,
) -> Result<ApufInstance> {
    if !(0.0..0.5).contains(&target) || !(tolerance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "calibration needs 0 <= target < 0.5 and tolerance > 0, got {target} ± {tolerance}"
        )));
    }
    if cfg.n_challenges == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one challenge".into()));
    }
    let nominal = apuf.nominal();
    let challenges: Vec<Challenge> = (0..cfg.n_challenges).map(|_| random_challenge(apuf.k(), rng)).collect();
    let seed = rng.next_u64();
    let ber_at = |sigma: f64| -> Result<(ApufInstance, f64)> {
        let candidate = apuf.with_noise_sigma(sigma)?;
        let count = measure_ber(
            &candidate,
            &challenges,
            nominal,
            nominal,
            cfg.repeats,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        Ok((candidate, count.rate()))
    };
    let within = |ber: f64| (ber - target).abs() <= tolerance;

    let (noiseless, ber0) = ber_at(0.0)?;
    if within(ber0) {
        return Ok(noiseless);
    }
    if ber0 > target {
        return Err(Error::Calibration(format!(
            "noiseless BER {ber0} already exceeds the target {target}"
        )));
    }

    // Bracket from the spread of the nominal delay differences.
    let resolved = apuf.at(nominal)?;
    let spread = {
        let d: Vec<f64> = challenges.iter().map(|c| resolved.delay_difference(c)).collect::<Result<_>>()?;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    };
    let mut lo = 0.0;
    let mut hi = if spread > 0.0 { 0.05 * spread } else { 1e-3 };
    let mut found = None;
    for _ in 0..60 {
        let (inst, ber) = ber_at(hi)?;
        if within(ber) {
            found = Some(inst);
            break;
        }
        if ber > target {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if let Some(inst) = found {
        return Ok(inst);
    }
    if ber_at(hi)?.1 < target {
        return Err(Error::Calibration(format!("could not bracket target BER {target}")));
    }
    for _ in 0..cfg.max_iterations {
        let mid = 0.5 * (lo + hi);
        let (inst, ber) = ber_at(mid)?;
        if within(ber) {
            log::debug!("calibrated noise_sigma = {mid} (nominal BER {ber})");
            return Ok(inst);
        }
        if ber < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "bisection did not reach {target} ± {tolerance} within {} iterations",
        cfg.max_iterations
    )))
}

/// Fraction of ones.
pub fn randomness(bits: &[ResponseBit]) -> Result<f64> {
    if bits.is_empty() {
        return Err(Error::InvalidArgument("randomness of an empty bit sequence".into()));
    }
    Ok(bits.iter().filter(|&&b| b == ResponseBit::One).count() as f64 / bits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBer {
    pub condition: OperatingCondition,
    pub ber: RateEstimate,
}

/// BER of selected challenges at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerAtDt {
    pub delta_t: f64,
    pub selected: usize,
    pub candidates_examined: u64,
    pub per_condition: Vec<ConditionBer>,
    /// Condition with the highest rate.
    pub worst: ConditionBer,
    /// All conditions pooled.
    pub pooled: RateEstimate,
    /// Fraction of ones among the predicted bits of the selected challenges.
    pub fraction_ones: f64,
}

impl BerAtDt {
    fn from_counts(
        delta_t: f64,
        selected: usize,
        candidates_examined: u64,
        grid: &ConditionGrid,
        counts: &[BerCount],
        fraction_ones: f64,
    ) -> Self {
        let per_condition: Vec<ConditionBer> = grid
            .conditions
            .iter()
            .zip(counts)
            .map(|(&condition, c)| ConditionBer {
                condition,
                ber: c.estimate(),
            })
            .collect();
        let worst = per_condition
            .iter()
            .max_by(|a, b| a.ber.rate.total_cmp(&b.ber.rate))
            .cloned()
            .expect("non-empty grid");
        let pooled = counts.iter().copied().sum::<BerCount>().estimate();
        Self {
            delta_t,
            selected,
            candidates_examined,
            per_condition,
            worst,
            pooled,
            fraction_ones,
        }
    }

    pub fn worst_counts(&self) -> BerCount {
        BerCount {
            errors: self.worst.ber.errors,
            trials: self.worst.ber.trials,
        }
    }
}

/// Generate `n_selected` reliable challenges at `delta_t`, take reference
/// bits at nominal and re-evaluate each `repeats` times at every grid
/// condition.
pub fn ber_at_dt<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    m: &DelayModel,
    delta_t: f64,
    grid: &ConditionGrid,
    n_selected: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<BerAtDt> {
    if n_selected == 0 {
        return Err(Error::InvalidArgument("n_selected must be at least 1".into()));
    }
    grid.validate(apuf)?;
    let batch = generate_reliable(m, delta_t, n_selected, rng, None)?;
    let challenges: Vec<Challenge> = batch.members.iter().map(|b| b.challenge.clone()).collect();
    let counts = measure_ber_grid(apuf, &challenges, grid.nominal(), &grid.conditions, repeats, rng)?;
    let fraction_ones = randomness(&batch.predicted_bits())?;
    Ok(BerAtDt::from_counts(
        delta_t,
        batch.len(),
        batch.candidates_examined,
        grid,
        &counts,
        fraction_ones,
    ))
}

/// BER@Δt for several thresholds on nested sets: one candidate pool is drawn
/// and evaluated once, and each threshold keeps the candidates whose
/// predicted `|t_dif|` exceeds it.
pub fn ber_sweep<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    m: &DelayModel,
    deltas: &[f64],
    grid: &ConditionGrid,
    n_candidates: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<Vec<BerAtDt>> {
    if deltas.is_empty() || n_candidates == 0 {
        return Err(Error::InvalidArgument("sweep needs thresholds and candidates".into()));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("delta_t must be >= 0, got {d}")));
    }
    if m.k() != apuf.k() {
        return Err(Error::Dimension {
            expected: apuf.k(),
            found: m.k(),
        });
    }
    grid.validate(apuf)?;
    let min_delta = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let pool: Vec<(Challenge, f64)> = (0..n_candidates)
        .map(|_| {
            let c = random_challenge(apuf.k(), rng);
            let t = m.predict_tdif(&c)?;
            Ok((c, t))
        })
        .collect::<Result<_>>()?;
    let eval = Evaluator::new(apuf, grid.nominal(), &grid.conditions, repeats)?;
    let seed = rng.next_u64();
    // Only candidates that pass the loosest threshold are evaluated.
    let evaluated: Vec<(f64, ResponseBit, Vec<u64>)> = pool
        .par_iter()
        .enumerate()
        .filter(|(_, (_, t))| t.abs() > min_delta)
        .map(|(i, (c, t))| {
            let (_, mismatches) = eval.run(c, &mut substream(seed, i as u64))?;
            Ok((t.abs(), ResponseBit::from_tdif(*t), mismatches))
        })
        .collect::<Result<_>>()?;

    deltas
        .iter()
        .map(|&delta_t| {
            let kept: Vec<&(f64, ResponseBit, Vec<u64>)> = evaluated.iter().filter(|e| e.0 > delta_t).collect();
            if kept.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no candidate out of {n_candidates} passes delta_t = {delta_t}"
                )));
            }
            let trials = (kept.len() * repeats) as u64;
            let counts: Vec<BerCount> = (0..grid.len())
                .map(|j| BerCount {
                    errors: kept.iter().map(|e| e.2[j]).sum(),
                    trials,
                })
                .collect();
            let bits: Vec<ResponseBit> = kept.iter().map(|e| e.1).collect();
            Ok(BerAtDt::from_counts(
                delta_t,
                kept.len(),
                n_candidates as u64,
                grid,
                &counts,
                randomness(&bits)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Random challenges for the unfiltered per-condition BER.
    pub n_challenges: usize,
    pub repeats: usize,
    /// Candidate pool of the nested BER@Δt sweep.
    pub n_candidates: usize,
    pub loss_sample_size: usize,
    /// Selected challenges whose predicted bits feed the randomness figure.
    pub randomness_count: usize,
    /// Random challenges for the model/instance agreement figure.
    pub accuracy_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_challenges: 10_000,
            repeats: 11,
            n_candidates: 100_000,
            loss_sample_size: 100_000,
            randomness_count: 10_000,
            accuracy_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub seed: u64,
    pub k: usize,
    pub noise_sigma: f64,
    pub model_fingerprint: String,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub delta_t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomnessPoint {
    pub delta_t: f64,
    pub count: usize,
    pub fraction_ones: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub params: RunParameters,
    pub grid: ConditionGrid,
    /// Agreement of model predictions with noiseless responses at nominal.
    pub model_accuracy: f64,
    /// Unfiltered BER per condition against the nominal reference.
    pub ber_default: Vec<ConditionBer>,
    pub ber_default_worst: ConditionBer,
    pub ber_at_dt: Vec<BerAtDt>,
    pub crp_loss: Vec<LossPoint>,
    pub randomness: Vec<RandomnessPoint>,
}

/// Run every evaluation for one instance/model pair. Deterministic in `seed`.
pub fn full_report(
    apuf: &ApufInstance,
    m: &DelayModel,
    deltas: &[f64],
    grid: &ConditionGrid,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    grid.validate(apuf)?;
    if m.k() != apuf.k() {
        return Err(Error::Dimension {
            expected: apuf.k(),
            found: m.k(),
        });
    }
    let nominal = grid.nominal();

    let mut rng = substream(seed, 0);
    let resolved = apuf.at(nominal)?;
    let mut agree = 0usize;
    for _ in 0..cfg.accuracy_samples {
        let c = random_challenge(apuf.k(), &mut rng);
        if m.predict_response(&c)? == ResponseBit::from_tdif(resolved.delay_difference(&c)?) {
            agree += 1;
        }
    }
    let model_accuracy = agree as f64 / cfg.accuracy_samples.max(1) as f64;

    let mut rng = substream(seed, 1);
    let challenges: Vec<Challenge> = (0..cfg.n_challenges).map(|_| random_challenge(apuf.k(), &mut rng)).collect();
    let default_counts = measure_ber_grid(apuf, &challenges, nominal, &grid.conditions, cfg.repeats, &mut rng)?;
    let ber_default: Vec<ConditionBer> = grid
        .conditions
        .iter()
        .zip(&default_counts)
        .map(|(&condition, c)| ConditionBer {
            condition,
            ber: c.estimate(),
        })
        .collect();
    let ber_default_worst = ber_default
        .iter()
        .max_by(|a, b| a.ber.rate.total_cmp(&b.ber.rate))
        .cloned()
        .expect("non-empty grid");

    let ber_at_dt = ber_sweep(apuf, m, deltas, grid, cfg.n_candidates, cfg.repeats, &mut substream(seed, 2))?;

    let losses = crp_loss_curve(m, deltas, cfg.loss_sample_size, &mut substream(seed, 3))?;
    let crp_loss = deltas
        .iter()
        .zip(losses)
        .map(|(&delta_t, loss)| LossPoint { delta_t, loss })
        .collect();

    let randomness = deltas
        .iter()
        .enumerate()
        .map(|(i, &delta_t)| {
            let batch = generate_reliable(m, delta_t, cfg.randomness_count.max(1), &mut substream(seed, 4 + i as u64), None)?;
            Ok(RandomnessPoint {
                delta_t,
                count: batch.len(),
                fraction_ones: self::randomness(&batch.predicted_bits())?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        params: RunParameters {
            seed,
            k: apuf.k(),
            noise_sigma: apuf.noise_sigma(),
            model_fingerprint: m.fingerprint(),
            config: *cfg,
        },
        grid: grid.clone(),
        model_accuracy,
        ber_default,
        ber_default_worst,
        ber_at_dt,
        crp_loss,
        randomness,
    })
}

fn pct(rate: f64) -> String {
    format!("{:.4}", 100.0 * rate)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(Error::Schema(format!(
                "expected {REPORT_FORMAT} v{REPORT_VERSION}, found {} v{}",
                report.format, report.version
            )));
        }
        Ok(report)
    }

    /// Worst-case and pooled BER@Δt in percent, one row per labelled report,
    /// one column per threshold.
    pub fn table_csv(reports: &[(String, &EvalReport)]) -> Result<String> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to tabulate".into()))?
            .1;
        let deltas: Vec<f64> = first.ber_at_dt.iter().map(|b| b.delta_t).collect();
        let mut out = String::from("apuf,ber_default_pct");
        for d in &deltas {
            write!(out, ",ber_at_{d}_pct").unwrap();
        }
        for d in &deltas {
            write!(out, ",pooled_at_{d}_pct").unwrap();
        }
        out.push('\n');
        for (label, r) in reports {
            let row_deltas: Vec<f64> = r.ber_at_dt.iter().map(|b| b.delta_t).collect();
            if row_deltas != deltas {
                return Err(Error::Schema(format!("report `{label}` uses a different delta_t grid")));
            }
            write!(out, "{label},{}", pct(r.ber_default_worst.ber.rate)).unwrap();
            for b in &r.ber_at_dt {
                write!(out, ",{}", pct(b.worst.ber.rate)).unwrap();
            }
            for b in &r.ber_at_dt {
                write!(out, ",{}", pct(b.pooled.rate)).unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Long-format per-condition counts for every threshold; `delta_t` is
    /// empty for the unfiltered rows.
    pub fn conditions_csv(&self) -> String {
        let mut out = String::from("delta_t,voltage_V,temperature_C,errors,trials,ber,ci95_radius,upper95\n");
        let rows = self
            .ber_default
            .iter()
            .map(|c| (String::new(), c))
            .chain(self.ber_at_dt.iter().flat_map(|b| {
                b.per_condition.iter().map(move |c| (b.delta_t.to_string(), c))
            }));
        for (d, c) in rows {
            writeln!(
                out,
                "{d},{},{},{},{},{},{},{}",
                c.condition.voltage,
                c.condition.temperature,
                c.ber.errors,
                c.ber.trials,
                c.ber.rate,
                c.ber.ci95_radius,
                c.ber.upper95
            )
            .unwrap();
        }
        out
    }

    /// Whitespace-separated curve dumps: BER per condition, CRP loss and
    /// fraction of ones per threshold.
    pub fn curves(&self) -> [(&'static str, String); 3] {
        let mut ber = String::from("# voltage_V temperature_C ber\n");
        for c in &self.ber_default {
            writeln!(ber, "{} {} {}", c.condition.voltage, c.condition.temperature, c.ber.rate).unwrap();
        }
        let mut loss = String::from("# delta_t crp_loss\n");
        for p in &self.crp_loss {
            writeln!(loss, "{} {}", p.delta_t, p.loss).unwrap();
        }
        let mut ones = String::from("# delta_t fraction_ones\n");
        for p in &self.randomness {
            writeln!(ones, "{} {}", p.delta_t, p.fraction_ones).unwrap();
        }
        [("ber_by_condition", ber), ("crp_loss", loss), ("randomness", ones)]
    }
}
