//! Synthetic APUF instances built from ring-oscillator frequency measurements.
//!
//! Four ROs stand in for the four segments of each stage: the segment delay
//! is the inverse RO frequency. Measurements come as one voltage sweep at the
//! nominal temperature and one temperature sweep at the nominal voltage; a
//! line through the nominal point is fitted along each sweep to obtain the
//! segment's voltage and temperature coefficients.
//!
//! CSV layout, one measurement per row, rows in any order:
//!
//! ```text
//! ro_id,voltage_V,temperature_C,sample_idx,frequency_MHz
//! 0,1.2,25,0,200.113
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::apuf::{ApufInstance, Envelope, OperatingCondition, StageDelays};
use crate::error::{Error, Result};

pub const RO_CSV_HEADER: [&str; 5] = ["ro_id", "voltage_V", "temperature_C", "sample_idx", "frequency_MHz"];

/// The measurement grid of the public RO dataset: 0.96–1.44 V at 25 °C and
/// 35–65 °C at 1.20 V, nominal included once.
pub fn default_conditions() -> Vec<OperatingCondition> {
    let nominal = OperatingCondition::NOMINAL;
    let mut out: Vec<OperatingCondition> = [0.96, 1.08, 1.20, 1.32, 1.44]
        .into_iter()
        .map(|v| OperatingCondition::new(v, nominal.temperature))
        .collect();
    out.extend([35.0, 45.0, 55.0, 65.0].map(|t| OperatingCondition::new(nominal.voltage, t)));
    out
}

/// Frequencies in MHz, indexed `[ro][condition][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoMeasurementSet {
    ro_count: usize,
    conditions: Vec<OperatingCondition>,
    samples: Vec<Vec<Vec<f64>>>,
}

impl RoMeasurementSet {
    pub fn new(conditions: Vec<OperatingCondition>, samples: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if samples.is_empty() || conditions.is_empty() {
            return Err(Error::Schema("measurement set has no ROs or no conditions".into()));
        }
        for (ro, per_cond) in samples.iter().enumerate() {
            if per_cond.len() != conditions.len() {
                return Err(Error::Schema(format!("RO {ro} is missing conditions")));
            }
            for (ci, cell) in per_cond.iter().enumerate() {
                if cell.is_empty() {
                    return Err(Error::Schema(format!("RO {ro} has no samples at {}", conditions[ci])));
                }
                if let Some(f) = cell.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
                    return Err(Error::Schema(format!(
                        "RO {ro} at {} has non-positive frequency {f}",
                        conditions[ci]
                    )));
                }
            }
        }
        Ok(Self {
            ro_count: samples.len(),
            conditions,
            samples,
        })
    }

    pub fn ro_count(&self) -> usize {
        self.ro_count
    }

    pub fn conditions(&self) -> &[OperatingCondition] {
        &self.conditions
    }

    pub fn cell(&self, ro: usize, condition: usize) -> &[f64] {
        &self.samples[ro][condition]
    }

    fn condition_index(&self, cond: OperatingCondition) -> Option<usize> {
        self.conditions.iter().position(|&c| c == cond)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RO_CSV_HEADER)?;
        for (ro, per_cond) in self.samples.iter().enumerate() {
            for (cond, cell) in self.conditions.iter().zip(per_cond) {
                for (i, f) in cell.iter().enumerate() {
                    w.write_record([
                        ro.to_string(),
                        cond.voltage.to_string(),
                        cond.temperature.to_string(),
                        i.to_string(),
                        f.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

pub fn parse_ro_dataset(path: impl AsRef<Path>) -> Result<RoMeasurementSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_ro_csv(std::io::BufReader::new(file))
}

/// Parse the RO CSV schema. Conditions are ordered by (voltage, temperature)
/// and samples by `sample_idx`, so row order does not matter.
pub fn parse_ro_csv<R: Read>(reader: R) -> Result<RoMeasurementSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        None => return Err(Error::Schema("empty RO dataset".into())),
        Some(h) => h?,
    };
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if let Some(missing) = RO_CSV_HEADER.iter().find(|col| !header.contains(col)) {
        return Err(Error::Schema(format!("missing column `{missing}` in RO dataset header")));
    }
    let col = |name: &str| header.iter().position(|h| *h == name).expect("checked above");
    let [i_ro, i_v, i_t, i_s, i_f] = RO_CSV_HEADER.map(col);

    // (voltage bits, temperature bits) -> ro -> sample_idx -> frequency
    type Cells = BTreeMap<usize, BTreeMap<u64, f64>>;
    let mut by_cond: BTreeMap<(OrdF64, OrdF64), Cells> = BTreeMap::new();
    let mut max_ro = 0usize;
    for (i, row) in rows.enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if row.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let field = |idx: usize| row[idx].trim();
        let parse_err = |what: &str, idx: usize| Error::Parse {
            line,
            message: format!("invalid {what} `{}`", field(idx)),
        };
        let ro: usize = field(i_ro).parse().map_err(|_| parse_err("ro_id", i_ro))?;
        let voltage: f64 = field(i_v).parse().map_err(|_| parse_err("voltage_V", i_v))?;
        let temperature: f64 = field(i_t).parse().map_err(|_| parse_err("temperature_C", i_t))?;
        let sample: u64 = field(i_s).parse().map_err(|_| parse_err("sample_idx", i_s))?;
        let freq: f64 = field(i_f).parse().map_err(|_| parse_err("frequency_MHz", i_f))?;
        if !voltage.is_finite() || !temperature.is_finite() {
            return Err(parse_err("operating condition", i_v));
        }
        if !(freq > 0.0 && freq.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!(
                    "frequency {} of RO {ro} at ({voltage} V, {temperature} °C), sample {sample}, must be positive",
                    field(i_f)
                ),
            });
        }
        max_ro = max_ro.max(ro);
        let cell = by_cond
            .entry((OrdF64(voltage), OrdF64(temperature)))
            .or_default()
            .entry(ro)
            .or_default();
        if cell.insert(sample, freq).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate sample {sample} for RO {ro} at ({voltage} V, {temperature} °C)"),
            });
        }
    }
    if by_cond.is_empty() {
        return Err(Error::Schema("RO dataset has a header but no measurements".into()));
    }
    let ro_count = max_ro + 1;
    let conditions: Vec<OperatingCondition> = by_cond
        .keys()
        .map(|(v, t)| OperatingCondition::new(v.0, t.0))
        .collect();
    let mut samples = vec![Vec::with_capacity(conditions.len()); ro_count];
    for (cond, cells) in conditions.iter().zip(by_cond.values()) {
        for (ro, per_ro) in samples.iter_mut().enumerate() {
            let cell = cells
                .get(&ro)
                .ok_or_else(|| Error::Schema(format!("RO {ro} has no measurements at {cond}")))?;
            per_ro.push(cell.values().copied().collect());
        }
    }
    RoMeasurementSet::new(conditions, samples)
}

/// Map key ordered by `total_cmp`, so equality agrees with the ordering.
#[derive(Debug, Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Per stage, the RO indices used for `(t13, t24, t14, t23)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageAssignment(pub Vec<[usize; 4]>);

impl StageAssignment {
    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self, ro_count: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Assignment("assignment has no stages".into()));
        }
        if 4 * self.0.len() > ro_count {
            return Err(Error::Assignment(format!(
                "{} stages need {} ROs, only {ro_count} available",
                self.0.len(),
                4 * self.0.len()
            )));
        }
        let mut seen = vec![false; ro_count];
        for (stage, quad) in self.0.iter().enumerate() {
            for &ro in quad {
                if ro >= ro_count {
                    return Err(Error::Assignment(format!(
                        "stage {} uses RO {ro}, out of range for {ro_count} ROs",
                        stage + 1
                    )));
                }
                if std::mem::replace(&mut seen[ro], true) {
                    return Err(Error::Assignment(format!("RO {ro} assigned more than once")));
                }
            }
        }
        Ok(())
    }
}

/// Random permutation of the ROs sliced into `k` quadruples.
pub fn default_assignment<R: Rng + ?Sized>(ro_count: usize, k: usize, rng: &mut R) -> Result<StageAssignment> {
    if k == 0 {
        return Err(Error::Assignment("stage count must be at least 1".into()));
    }
    if 4 * k > ro_count {
        return Err(Error::Assignment(format!(
            "{k} stages need {} ROs, only {ro_count} available",
            4 * k
        )));
    }
    let mut ids: Vec<usize> = (0..ro_count).collect();
    ids.shuffle(rng);
    Ok(StageAssignment(
        ids.chunks_exact(4).take(k).map(|q| [q[0], q[1], q[2], q[3]]).collect(),
    ))
}

/// Dispersion of the synthetic RO fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureParams {
    pub mean_mhz: f64,
    /// Spread of nominal frequency across ROs.
    pub ro_sd_mhz: f64,
    /// Mean and spread of df/dV across ROs, MHz/V.
    pub volt_slope_mean: f64,
    pub volt_slope_sd: f64,
    /// Mean and spread of df/dT across ROs, MHz/°C.
    pub temp_slope_mean: f64,
    pub temp_slope_sd: f64,
    /// Per-measurement jitter.
    pub jitter_sd_mhz: f64,
    pub samples_per_cell: usize,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            mean_mhz: 200.0,
            ro_sd_mhz: 1.0,
            volt_slope_mean: 40.0,
            volt_slope_sd: 1.6,
            temp_slope_mean: -0.05,
            temp_slope_sd: 0.0035,
            jitter_sd_mhz: 0.1,
            samples_per_cell: 100,
        }
    }
}

/// Synthetic RO measurements: each RO drifts linearly in frequency with
/// voltage and temperature deviation from nominal, plus Gaussian jitter.
pub fn generate_ro_fixture<R: Rng + ?Sized>(
    ro_count: usize,
    conditions: &[OperatingCondition],
    params: &FixtureParams,
    rng: &mut R,
) -> Result<RoMeasurementSet> {
    if ro_count < 4 {
        return Err(Error::InvalidArgument(format!("fixture needs at least 4 ROs, got {ro_count}")));
    }
    if params.samples_per_cell == 0 {
        return Err(Error::InvalidArgument("samples_per_cell must be at least 1".into()));
    }
    let normal = |m: f64, s: f64| {
        Normal::new(m, s).map_err(|e| Error::InvalidArgument(format!("bad fixture parameters: {e}")))
    };
    let base = normal(params.mean_mhz, params.ro_sd_mhz)?;
    let vslope = normal(params.volt_slope_mean, params.volt_slope_sd)?;
    let tslope = normal(params.temp_slope_mean, params.temp_slope_sd)?;
    let jitter = normal(0.0, params.jitter_sd_mhz)?;
    let nominal = OperatingCondition::NOMINAL;
    let samples = (0..ro_count)
        .map(|_| {
            let f0 = base.sample(rng);
            let a = vslope.sample(rng);
            let b = tslope.sample(rng);
            conditions
                .iter()
                .map(|c| {
                    let mean = f0 + a * (c.voltage - nominal.voltage) + b * (c.temperature - nominal.temperature);
                    (0..params.samples_per_cell).map(|_| mean + jitter.sample(rng)).collect()
                })
                .collect()
        })
        .collect();
    RoMeasurementSet::new(conditions.to_vec(), samples)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Least-squares slope of a line forced through `(0, 0)`, on deviations from
/// the nominal point.
fn anchored_slope(points: &[(f64, f64)]) -> Result<f64> {
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    if points.len() < 2 || sxx == 0.0 {
        return Err(Error::Fit(format!(
            "sweep needs at least two distinct points including nominal, got {}",
            points.len()
        )));
    }
    Ok(points.iter().map(|(x, y)| x * y).sum::<f64>() / sxx)
}

/// Fitted delay model of one RO: nominal inverse frequency (ns) and its
/// voltage (ns/V) and temperature (ns/°C) slopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoDelayFit {
    pub base: f64,
    pub volt_coeff: f64,
    pub temp_coeff: f64,
    /// Variance of the inverse frequency at nominal, ns².
    pub nominal_variance: f64,
}

pub fn fit_ro(set: &RoMeasurementSet, ro: usize, nominal: OperatingCondition) -> Result<RoDelayFit> {
    let ni = set
        .condition_index(nominal)
        .ok_or_else(|| Error::Schema(format!("dataset has no measurements at the nominal condition {nominal}")))?;
    let inverse = |ci: usize| -> Vec<f64> { set.cell(ro, ci).iter().map(|f| 1000.0 / f).collect() };
    let nominal_delays = inverse(ni);
    let base = mean(&nominal_delays);

    let mut vsweep = Vec::new();
    let mut tsweep = Vec::new();
    for (ci, c) in set.conditions().iter().enumerate() {
        let dy = mean(&inverse(ci)) - base;
        if c.temperature == nominal.temperature {
            vsweep.push((c.voltage - nominal.voltage, dy));
        }
        if c.voltage == nominal.voltage {
            tsweep.push((c.temperature - nominal.temperature, dy));
        }
    }
    let volt_coeff = anchored_slope(&vsweep).map_err(|e| Error::Fit(format!("voltage sweep of RO {ro}: {e}")))?;
    let temp_coeff = anchored_slope(&tsweep).map_err(|e| Error::Fit(format!("temperature sweep of RO {ro}: {e}")))?;
    Ok(RoDelayFit {
        base,
        volt_coeff,
        temp_coeff,
        nominal_variance: variance(&nominal_delays),
    })
}

/// Build a k-stage instance at the nominal condition (1.20 V, 25 °C).
///
/// Path noise is the root-mean per-RO variance of the nominal inverse
/// frequency, scaled by `sqrt(k / 2)`.
pub fn build_synthetic_apuf(ro: &RoMeasurementSet, k: usize, assign: &StageAssignment) -> Result<ApufInstance> {
    if assign.k() != k {
        return Err(Error::Assignment(format!("assignment has {} stages, expected {k}", assign.k())));
    }
    assign.validate(ro.ro_count())?;
    let nominal = OperatingCondition::NOMINAL;
    let mut stages = Vec::with_capacity(k);
    let mut var_sum = 0.0;
    for &[i13, i24, i14, i23] in &assign.0 {
        let [f13, f24, f14, f23] = [i13, i24, i14, i23].map(|i| fit_ro(ro, i, nominal));
        let (f13, f24, f14, f23) = (f13?, f24?, f14?, f23?);
        var_sum += f13.nominal_variance + f24.nominal_variance + f14.nominal_variance + f23.nominal_variance;
        stages.push(StageDelays {
            t13: f13.base,
            t14: f14.base,
            t23: f23.base,
            t24: f24.base,
            tc13: f13.temp_coeff,
            tc14: f14.temp_coeff,
            tc23: f23.temp_coeff,
            tc24: f24.temp_coeff,
            vc13: f13.volt_coeff,
            vc14: f14.volt_coeff,
            vc23: f23.volt_coeff,
            vc24: f24.volt_coeff,
        });
    }
    let noise_sigma = (var_sum / (4 * k) as f64).sqrt() * (k as f64 / 2.0).sqrt();
    ApufInstance::new(stages, nominal, noise_sigma, Envelope::default())
}
