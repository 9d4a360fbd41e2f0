//! Statistical delay model of an arbiter PUF learned from nominal-condition CRPs.
//!
//! Under the parity transform `φ_i = ∏_{j≥i} (1 − 2c_j)` the delay difference
//! of an additive-delay APUF is exactly linear, `t_dif = ⟨w, φ(c)⟩`, with one
//! weight per stage plus a bias. The weights are fitted by logistic
//! regression on majority-voted responses, and the per-stage probabilities
//! `P13, P24, P14, P23` are read back from them through the logistic link.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apuf::{random_challenge, ApufInstance, Challenge, OperatingCondition, ResponseBit};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "apuf-delay-model";
pub const MODEL_VERSION: u32 = 1;

/// One challenge with its repeated evaluations at a single condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CrpRecord {
    pub challenge: Challenge,
    pub condition: OperatingCondition,
    pub responses: Vec<ResponseBit>,
}

impl CrpRecord {
    pub fn new(challenge: Challenge, condition: OperatingCondition, responses: Vec<ResponseBit>) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::InvalidArgument("a CRP record needs at least one response".into()));
        }
        Ok(Self {
            challenge,
            condition,
            responses,
        })
    }

    /// Most frequent response; ties go to 1 like the arbiter.
    pub fn majority(&self) -> ResponseBit {
        majority(&self.responses)
    }
}

pub fn majority(bits: &[ResponseBit]) -> ResponseBit {
    let ones = bits.iter().filter(|&&b| b == ResponseBit::One).count();
    if 2 * ones >= bits.len() {
        ResponseBit::One
    } else {
        ResponseBit::Zero
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpDataset {
    pub k: usize,
    pub label: String,
    pub records: Vec<CrpRecord>,
}

impl CrpDataset {
    pub fn new(k: usize, label: impl Into<String>, records: Vec<CrpRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.challenge.len() != k) {
            return Err(Error::Dimension {
                expected: k,
                found: r.challenge.len(),
            });
        }
        Ok(Self {
            k,
            label: label.into(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Evaluate `n` uniform random challenges `repeats` times each at `cond`.
pub fn collect_crps<R: Rng + ?Sized>(
    apuf: &ApufInstance,
    n: usize,
    cond: OperatingCondition,
    repeats: usize,
    rng: &mut R,
) -> Result<CrpDataset> {
    if n == 0 || repeats == 0 {
        return Err(Error::InvalidArgument("collect_crps needs n >= 1 and repeats >= 1".into()));
    }
    let resolved = apuf.at(cond)?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let challenge = random_challenge(apuf.k(), rng);
        let responses = (0..repeats)
            .map(|_| resolved.evaluate(&challenge, rng))
            .collect::<Result<Vec<_>>>()?;
        records.push(CrpRecord {
            challenge,
            condition: cond,
            responses,
        });
    }
    CrpDataset::new(apuf.k(), format!("{cond}"), records)
}

/// Parity features `(φ_1, .., φ_k, 1)`.
pub fn feature_transform(c: &Challenge) -> Vec<f64> {
    let mut out = vec![0.0; c.len() + 1];
    write_features(c, &mut out);
    out
}

fn write_features(c: &Challenge, out: &mut [f64]) {
    let k = c.len();
    debug_assert_eq!(out.len(), k + 1);
    out[k] = 1.0;
    let mut acc = 1.0;
    for i in (0..k).rev() {
        if c.bits()[i] == 1 {
            acc = -acc;
        }
        out[i] = acc;
    }
}

fn dot_parity(weights: &[f64], c: &Challenge) -> f64 {
    let k = c.len();
    let mut acc = 1.0;
    let mut sum = weights[k];
    for i in (0..k).rev() {
        if c.bits()[i] == 1 {
            acc = -acc;
        }
        sum += acc * weights[i];
    }
    sum
}

/// Parity-basis weights reproducing the noiseless delay difference of `apuf`
/// at `cond`, from the stage-by-stage delay-difference recurrence.
pub fn weights_from_instance(apuf: &ApufInstance, cond: OperatingCondition) -> Result<Vec<f64>> {
    let k = apuf.k();
    let mut straight = Vec::with_capacity(k);
    let mut cross = Vec::with_capacity(k);
    for i in 0..k {
        let d = apuf.effective_stage_delays(i, cond)?;
        straight.push(d.t13 - d.t24);
        cross.push(d.t23 - d.t14);
    }
    Ok(weights_from_stage_differences(&straight, &cross))
}

/// `straight[i] = t13 − t24`, `cross[i] = t23 − t14` for each stage.
pub fn weights_from_stage_differences(straight: &[f64], cross: &[f64]) -> Vec<f64> {
    let k = straight.len();
    assert_eq!(k, cross.len());
    let half_diff: Vec<f64> = straight.iter().zip(cross).map(|(a, b)| (a - b) / 2.0).collect();
    let half_sum: Vec<f64> = straight.iter().zip(cross).map(|(a, b)| (a + b) / 2.0).collect();
    let mut w = vec![0.0; k + 1];
    for i in 0..k {
        let coeff = half_diff[i] + if i > 0 { half_sum[i - 1] } else { 0.0 };
        w[i] = parity_sign(i, k) * coeff;
    }
    w[k] = half_sum[k - 1];
    w
}

/// Sign relating the straight-through product basis to the parity basis at
/// 0-based stage `i`.
fn parity_sign(i: usize, k: usize) -> f64 {
    if (k - i).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Split of parity weights back into per-stage `(t13 − t24, t23 − t14)`
/// estimates. Weight `i > 0` mixes stage `i`'s half-difference with stage
/// `i − 1`'s half-sum and is shared equally between them; the map is not
/// unique, only its image in weight space is.
pub fn stage_differences(weights: &[f64]) -> Vec<(f64, f64)> {
    let k = weights.len() - 1;
    let coeff: Vec<f64> = (0..k).map(|i| parity_sign(i, k) * weights[i]).collect();
    let mut half_diff = vec![0.0; k];
    let mut half_sum = vec![0.0; k];
    half_diff[0] = coeff[0];
    for i in 1..k {
        half_diff[i] = coeff[i] / 2.0;
        half_sum[i - 1] = coeff[i] / 2.0;
    }
    half_sum[k - 1] = weights[k];
    (0..k)
        .map(|i| (half_diff[i] + half_sum[i], half_sum[i] - half_diff[i]))
        .collect()
}

/// Per-stage probabilities that one segment of a pairing is slower.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageProbabilities {
    pub p13: f64,
    pub p24: f64,
    pub p14: f64,
    pub p23: f64,
}

impl StageProbabilities {
    fn from_differences(straight: f64, cross: f64) -> Self {
        let p13 = clamp_open(sigmoid(straight));
        let p14 = clamp_open(sigmoid(-cross));
        Self {
            p13,
            p24: 1.0 - p13,
            p14,
            p23: 1.0 - p14,
        }
    }
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the loss changes by less than this between epochs.
    pub tolerance: f64,
    pub heldout_fraction: f64,
    pub min_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            max_epochs: 2000,
            tolerance: 1e-7,
            heldout_fraction: 0.1,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub n_train: usize,
    pub n_heldout: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
    pub warnings: Vec<String>,
    /// Wall time is kept out of the file so model files stay reproducible.
    #[serde(skip)]
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel {
    k: usize,
    weights: Vec<f64>,
    scale: f64,
    stage_probs: Vec<StageProbabilities>,
    pub metadata: TrainingMetadata,
}

impl DelayModel {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        Self::with_scale(weights, 1.0)
    }

    pub fn with_scale(weights: Vec<f64>, scale: f64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidArgument("a delay model needs k >= 1 stage weights plus a bias".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("model weights must be finite".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("model scale must be > 0, got {scale}")));
        }
        let stage_probs = stage_differences(&weights)
            .into_iter()
            .map(|(s, c)| StageProbabilities::from_differences(s / scale, c / scale))
            .collect();
        Ok(Self {
            k: weights.len() - 1,
            weights,
            scale,
            stage_probs,
            metadata: TrainingMetadata::default(),
        })
    }

    /// Exact model of `apuf` at `cond` (unit scale, delays in ns).
    pub fn from_instance(apuf: &ApufInstance, cond: OperatingCondition) -> Result<Self> {
        Self::from_weights(weights_from_instance(apuf, cond)?)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn stage_probs(&self) -> &[StageProbabilities] {
        &self.stage_probs
    }

    fn check(&self, c: &Challenge) -> Result<()> {
        if c.len() == self.k {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: self.k,
                found: c.len(),
            })
        }
    }

    fn raw_tdif(&self, c: &Challenge) -> f64 {
        dot_parity(&self.weights, c)
    }

    pub fn predict_tdif(&self, c: &Challenge) -> Result<f64> {
        self.check(c)?;
        Ok(self.raw_tdif(c) / self.scale)
    }

    pub fn predict_response(&self, c: &Challenge) -> Result<ResponseBit> {
        Ok(ResponseBit::from_tdif(self.predict_tdif(c)?))
    }

    /// Rescale so predicted `t_dif` over uniform random challenges has unit
    /// empirical standard deviation.
    pub fn normalize<R: Rng + ?Sized>(&self, sample_size: usize, rng: &mut R) -> Result<Self> {
        if sample_size < 1000 {
            return Err(Error::InvalidArgument(format!(
                "normalization needs at least 1000 samples, got {sample_size}"
            )));
        }
        let raw: Vec<f64> = (0..sample_size)
            .map(|_| self.raw_tdif(&random_challenge(self.k, rng)))
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (raw.len() - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::Normalization("predicted delay differences have zero spread".into()));
        }
        let mut out = Self::with_scale(self.weights.clone(), sd)?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    /// Fraction of records whose predicted response equals the majority bit.
    pub fn accuracy(&self, data: &CrpDataset) -> Result<f64> {
        accuracy_over(self, &data.records)
    }

    /// Short hex digest of `k`, weights and scale.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.k as u64).to_le_bytes());
        for w in &self.weights {
            hasher.update(w.to_bits().to_le_bytes());
        }
        hasher.update(self.scale.to_bits().to_le_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            k: self.k,
            weights: self.weights.clone(),
            scale: self.scale,
            stage_probs: self.stage_probs.clone(),
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("expected format `{MODEL_FORMAT}`, found `{}`", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::Schema(format!("unsupported model version {}", doc.version)));
        }
        if doc.weights.len() != doc.k + 1 {
            return Err(Error::Schema(format!(
                "k = {} requires {} weights, found {}",
                doc.k,
                doc.k + 1,
                doc.weights.len()
            )));
        }
        let mut model = Self::with_scale(doc.weights, doc.scale)?;
        model.metadata = doc.metadata;
        Ok(model)
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
struct ModelDocument {
    format: String,
    version: u32,
    k: usize,
    weights: Vec<f64>,
    scale: f64,
    stage_probs: Vec<StageProbabilities>,
    metadata: TrainingMetadata,
}

fn accuracy_over(model: &DelayModel, records: &[CrpRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("accuracy needs a non-empty dataset".into()));
    }
    let mut hits = 0usize;
    for r in records {
        if model.predict_response(&r.challenge)? == r.majority() {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Label convention: +1 for response 0 (positive `t_dif`), −1 for response 1.
fn label(bit: ResponseBit) -> f64 {
    match bit {
        ResponseBit::Zero => 1.0,
        ResponseBit::One => -1.0,
    }
}

/// Dense design matrix of parity features with ±1 labels.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl LogisticProblem {
    pub fn new(k: usize, samples: &[(Challenge, ResponseBit)]) -> Result<Self> {
        let dim = k + 1;
        let mut features = vec![0.0; samples.len() * dim];
        let mut labels = Vec::with_capacity(samples.len());
        for ((c, bit), row) in samples.iter().zip(features.chunks_mut(dim)) {
            if c.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    found: c.len(),
                });
            }
            write_features(c, row);
            labels.push(label(*bit));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean logistic loss and its gradient with respect to the weights.
    pub fn loss_and_gradient(&self, weights: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(weights.len(), self.dim);
        let n = self.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (row, &y) in self.features.chunks(self.dim).zip(&self.labels) {
            let z: f64 = row.iter().zip(weights).map(|(x, w)| x * w).sum();
            let margin = y * z;
            loss += softplus(-margin);
            let g = -y * sigmoid(-margin);
            for (acc, x) in grad.iter_mut().zip(row) {
                *acc += g * x;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn loss(&self, weights: &[f64]) -> f64 {
        self.loss_and_gradient(weights).0
    }
}

/// Full-batch gradient descent on the logistic loss of majority labels.
///
/// The last `heldout_fraction` of the records is held out for the accuracy
/// estimate. Weights start at zero, so the result depends only on the data.
pub fn train(data: &CrpDataset, cfg: &TrainConfig) -> Result<DelayModel> {
    if !(cfg.learning_rate > 0.0) || cfg.max_epochs == 0 || !(0.0..1.0).contains(&cfg.heldout_fraction) {
        return Err(Error::InvalidArgument(format!("invalid training configuration {cfg:?}")));
    }
    let labelled: Vec<(Challenge, ResponseBit)> =
        data.records.iter().map(|r| (r.challenge.clone(), r.majority())).collect();
    let has_zero = labelled.iter().any(|(_, b)| *b == ResponseBit::Zero);
    let has_one = labelled.iter().any(|(_, b)| *b == ResponseBit::One);
    if !(has_zero && has_one) {
        return Err(Error::InvalidArgument(
            "training data must contain both response values".into(),
        ));
    }

    let started = Instant::now();
    let n_heldout = (data.len() as f64 * cfg.heldout_fraction).floor() as usize;
    let n_train = data.len() - n_heldout;
    let problem = LogisticProblem::new(data.k, &labelled[..n_train])?;

    let mut weights = vec![0.0; data.k + 1];
    let (mut loss, mut grad) = problem.loss_and_gradient(&weights);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_epochs {
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
        let (next_loss, next_grad) = problem.loss_and_gradient(&weights);
        iterations += 1;
        let delta = (loss - next_loss).abs();
        loss = next_loss;
        grad = next_grad;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut model = DelayModel::from_weights(weights)?;
    let train_accuracy = accuracy_over(&model, &data.records[..n_train])?;
    let heldout_accuracy = if n_heldout > 0 {
        Some(accuracy_over(&model, &data.records[n_train..])?)
    } else {
        None
    };
    if !converged {
        log::info!("loss still moving after {} epochs", cfg.max_epochs);
    }
    let mut warnings = Vec::new();
    let reported = heldout_accuracy.unwrap_or(train_accuracy);
    if reported < cfg.min_accuracy {
        warnings.push(format!(
            "accuracy {reported:.4} below the required {:.4}",
            cfg.min_accuracy
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    model.metadata = TrainingMetadata {
        iterations,
        final_loss: loss,
        converged,
        n_train,
        n_heldout,
        train_accuracy,
        heldout_accuracy,
        warnings,
        train_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(model)
}
