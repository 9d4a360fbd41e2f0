//! Reliable challenge selection against a delay model.
//!
//! A challenge is kept when its predicted `|t_dif|` strictly exceeds the
//! threshold `Δt`; its response is then predicted from the sign of `t_dif`
//! (positive means 0). Everything at or inside the threshold is discarded.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apuf::{random_challenge, Challenge, ResponseBit};
use crate::error::{Error, Result};
use crate::model::DelayModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterDecision {
    Selected { predicted: ResponseBit, tdif: f64 },
    Discarded { tdif: f64 },
}

impl FilterDecision {
    pub fn tdif(&self) -> f64 {
        match *self {
            Self::Selected { tdif, .. } | Self::Discarded { tdif } => tdif,
        }
    }

    pub fn is_selected(&self) -> bool {
        matches!(self, Self::Selected { .. })
    }
}

fn check_delta(delta_t: f64) -> Result<()> {
    if delta_t >= 0.0 && delta_t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta_t must be a finite value >= 0, got {delta_t}")))
    }
}

fn decide(tdif: f64, delta_t: f64) -> FilterDecision {
    if tdif > delta_t {
        FilterDecision::Selected {
            predicted: ResponseBit::Zero,
            tdif,
        }
    } else if tdif < -delta_t {
        FilterDecision::Selected {
            predicted: ResponseBit::One,
            tdif,
        }
    } else {
        FilterDecision::Discarded { tdif }
    }
}

pub fn select(c: &Challenge, m: &DelayModel, delta_t: f64) -> Result<FilterDecision> {
    check_delta(delta_t)?;
    Ok(decide(m.predict_tdif(c)?, delta_t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMember {
    pub challenge: Challenge,
    pub predicted: ResponseBit,
    pub tdif: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliableBatch {
    pub k: usize,
    pub delta_t: f64,
    pub model_fingerprint: String,
    pub candidates_examined: u64,
    pub members: Vec<BatchMember>,
}

impl ReliableBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn predicted_bits(&self) -> Vec<ResponseBit> {
        self.members.iter().map(|m| m.predicted).collect()
    }

    /// Re-check every member against `model`: the fingerprint must match and
    /// each recomputed `|t_dif|` must exceed the threshold with the same bit.
    pub fn verify(&self, model: &DelayModel) -> Result<()> {
        if model.fingerprint() != self.model_fingerprint {
            return Err(Error::Invariant(format!(
                "batch was built with model {} but checked against {}",
                self.model_fingerprint,
                model.fingerprint()
            )));
        }
        for (i, m) in self.members.iter().enumerate() {
            match select(&m.challenge, model, self.delta_t)? {
                FilterDecision::Selected { predicted, .. } if predicted == m.predicted => {}
                other => {
                    return Err(Error::Invariant(format!(
                        "batch member {i} ({}) fails re-selection: {other:?}",
                        m.challenge.to_hex()
                    )))
                }
            }
        }
        Ok(())
    }

    /// CSV with header `challenge_hex,predicted_bit,tdif`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["challenge_hex", "predicted_bit", "tdif"])?;
        for m in &self.members {
            w.write_record([m.challenge.to_hex(), m.predicted.to_string(), m.tdif.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self, seed: Option<u64>) -> BatchSidecar {
        BatchSidecar {
            k: self.k,
            delta_t: self.delta_t,
            model_fingerprint: self.model_fingerprint.clone(),
            seed,
            candidates_examined: self.candidates_examined,
            count: self.members.len(),
        }
    }

    pub fn read(csv_path: impl AsRef<Path>, sidecar: &BatchSidecar) -> Result<Self> {
        let mut reader = csv::Reader::from_path(csv_path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["challenge_hex", "predicted_bit", "tdif"] {
            return Err(Error::Schema(format!("unexpected batch header {headers:?}")));
        }
        let mut members = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let line = i as u64 + 2;
            let parse_err = |message: String| Error::Parse { line, message };
            let challenge = Challenge::from_hex(&row[0], sidecar.k).map_err(|e| parse_err(e.to_string()))?;
            let bit: u8 = row[1].parse().map_err(|_| parse_err(format!("bad predicted bit `{}`", &row[1])))?;
            let predicted = ResponseBit::try_from(bit).map_err(|e| parse_err(e.to_string()))?;
            let tdif: f64 = row[2].parse().map_err(|_| parse_err(format!("bad tdif `{}`", &row[2])))?;
            members.push(BatchMember {
                challenge,
                predicted,
                tdif,
            });
        }
        if members.len() != sidecar.count {
            return Err(Error::Schema(format!(
                "sidecar lists {} members, CSV holds {}",
                sidecar.count,
                members.len()
            )));
        }
        Ok(Self {
            k: sidecar.k,
            delta_t: sidecar.delta_t,
            model_fingerprint: sidecar.model_fingerprint.clone(),
            candidates_examined: sidecar.candidates_examined,
            members,
        })
    }
}

/// JSON metadata written next to a batch CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSidecar {
    pub k: usize,
    pub delta_t: f64,
    pub model_fingerprint: String,
    pub seed: Option<u64>,
    pub candidates_examined: u64,
    pub count: usize,
}

/// Candidate budget of `1000 × count / (1 − loss)`, with the loss estimated
/// on a fixed 10,000-challenge sample.
pub fn default_max_candidates(m: &DelayModel, delta_t: f64, count: usize) -> Result<u64> {
    const PROBE: usize = 10_000;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
    let loss = crp_loss(m, delta_t, PROBE, &mut probe_rng)?;
    let keep = (1.0 - loss).max(1.0 / (PROBE as f64 + 1.0));
    Ok((1000.0 * count as f64 / keep).min(u64::MAX as f64 / 2.0) as u64)
}

/// Draw random challenges until `count` pass the filter or the candidate
/// budget runs out.
pub fn generate_reliable<R: Rng + ?Sized>(
    m: &DelayModel,
    delta_t: f64,
    count: usize,
    rng: &mut R,
    max_candidates: Option<u64>,
) -> Result<ReliableBatch> {
    check_delta(delta_t)?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let budget = match max_candidates {
        Some(b) => b,
        None => default_max_candidates(m, delta_t, count)?,
    };
    let mut batch = ReliableBatch {
        k: m.k(),
        delta_t,
        model_fingerprint: m.fingerprint(),
        candidates_examined: 0,
        members: Vec::with_capacity(count),
    };
    while batch.members.len() < count && batch.candidates_examined < budget {
        let challenge = random_challenge(m.k(), rng);
        batch.candidates_examined += 1;
        if let FilterDecision::Selected { predicted, tdif } = select(&challenge, m, delta_t)? {
            batch.members.push(BatchMember {
                challenge,
                predicted,
                tdif,
            });
        }
    }
    if batch.members.len() < count {
        return Err(Error::PartialBatch {
            requested: count,
            batch: Box::new(batch),
        });
    }
    Ok(batch)
}

fn abs_tdif_sample<R: Rng + ?Sized>(m: &DelayModel, sample_size: usize, rng: &mut R) -> Vec<f64> {
    (0..sample_size)
        .map(|_| {
            m.predict_tdif(&random_challenge(m.k(), rng))
                .expect("challenge drawn at model width")
                .abs()
        })
        .collect()
}

/// Fraction of uniform random challenges discarded at `delta_t`.
pub fn crp_loss<R: Rng + ?Sized>(m: &DelayModel, delta_t: f64, sample_size: usize, rng: &mut R) -> Result<f64> {
    check_delta(delta_t)?;
    if sample_size == 0 {
        return Err(Error::InvalidArgument("sample_size must be at least 1".into()));
    }
    let discarded = abs_tdif_sample(m, sample_size, rng)
        .into_iter()
        .filter(|&t| !(t > delta_t))
        .count();
    Ok(discarded as f64 / sample_size as f64)
}

/// Loss curve over several thresholds from one shared challenge sample.
pub fn crp_loss_curve<R: Rng + ?Sized>(
    m: &DelayModel,
    deltas: &[f64],
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    for &d in deltas {
        check_delta(d)?;
    }
    if sample_size == 0 {
        return Err(Error::InvalidArgument("sample_size must be at least 1".into()));
    }
    let mut sample = abs_tdif_sample(m, sample_size, rng);
    sample.sort_by(f64::total_cmp);
    Ok(deltas
        .iter()
        .map(|&d| sample.partition_point(|&t| t <= d) as f64 / sample_size as f64)
        .collect())
}

/// Threshold whose empirical CRP loss over the sample is `target_loss`:
/// the `target_loss` quantile of `|t_dif|`.
pub fn loss_to_delta<R: Rng + ?Sized>(m: &DelayModel, target_loss: f64, sample_size: usize, rng: &mut R) -> Result<f64> {
    if !(0.0..1.0).contains(&target_loss) {
        return Err(Error::InvalidArgument(format!("target loss must lie in [0, 1), got {target_loss}")));
    }
    if sample_size == 0 {
        return Err(Error::InvalidArgument("sample_size must be at least 1".into()));
    }
    if target_loss == 0.0 {
        return Ok(0.0);
    }
    let mut sample = abs_tdif_sample(m, sample_size, rng);
    sample.sort_by(f64::total_cmp);
    let rank = (target_loss * sample_size as f64).ceil() as usize;
    Ok(sample[rank.clamp(1, sample_size) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_k1(w: f64, bias: f64) -> DelayModel {
        DelayModel::from_weights(vec![w, bias]).unwrap()
    }

    #[test]
    fn select_follows_sign_convention() {
        // all-zero challenge: φ = (1, 1), t_dif = w + bias
        let c = Challenge::new(vec![0]).unwrap();
        assert_eq!(
            select(&c, &model_k1(1.0, 1.0), 1.5).unwrap(),
            FilterDecision::Selected {
                predicted: ResponseBit::Zero,
                tdif: 2.0
            }
        );
        assert_eq!(select(&c, &model_k1(-0.5, -0.5), 1.5).unwrap(), FilterDecision::Discarded { tdif: -1.0 });
        assert_eq!(
            select(&c, &model_k1(-1.0, -1.0), 1.5).unwrap(),
            FilterDecision::Selected {
                predicted: ResponseBit::One,
                tdif: -2.0
            }
        );
    }

    #[test]
    fn boundary_is_discarded() {
        let c = Challenge::new(vec![0]).unwrap();
        assert!(!select(&c, &model_k1(0.75, 0.75), 1.5).unwrap().is_selected());
        assert!(!select(&c, &model_k1(-0.75, -0.75), 1.5).unwrap().is_selected());
    }

    #[test]
    fn zero_threshold_keeps_all_nonzero() {
        let c = Challenge::new(vec![0]).unwrap();
        assert!(select(&c, &model_k1(1e-9, 0.0), 0.0).unwrap().is_selected());
        assert!(!select(&c, &model_k1(0.0, 0.0), 0.0).unwrap().is_selected());
    }

    #[test]
    fn negative_threshold_rejected() {
        let c = Challenge::new(vec![0]).unwrap();
        assert!(select(&c, &model_k1(1.0, 0.0), -0.1).is_err());
    }

    #[test]
    fn partial_batch_keeps_what_was_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DelayModel::from_weights(vec![0.1; 9]).unwrap();
        match generate_reliable(&m, 1e6, 5, &mut rng, Some(10)) {
            Err(Error::PartialBatch { requested, batch }) => {
                assert_eq!(requested, 5);
                assert_eq!(batch.candidates_examined, 10);
                assert!(batch.members.is_empty());
            }
            other => panic!("expected partial batch, got {other:?}"),
        }
    }

    #[test]
    fn zero_threshold_examines_about_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..33).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.45).collect();
        let m = DelayModel::from_weights(w).unwrap();
        let batch = generate_reliable(&m, 0.0, 100, &mut rng, None).unwrap();
        assert_eq!(batch.len(), 100);
        assert!(batch.candidates_examined <= 105, "{}", batch.candidates_examined);
    }

    #[test]
    fn loss_to_delta_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DelayModel::from_weights(vec![0.3; 9]).unwrap();
        assert_eq!(loss_to_delta(&m, 0.0, 1000, &mut rng).unwrap(), 0.0);
        assert!(loss_to_delta(&m, 1.0, 1000, &mut rng).is_err());
        assert!(loss_to_delta(&m, -0.2, 1000, &mut rng).is_err());
    }

    #[test]
    fn batch_csv_round_trip_and_verify() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..14).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = DelayModel::from_weights(w).unwrap().normalize(5000, &mut rng).unwrap();
        let batch = generate_reliable(&m, 1.0, 50, &mut rng, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.csv");
        batch.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        let sidecar = batch.sidecar(Some(4));
        let text = serde_json::to_string(&sidecar).unwrap();
        let back = ReliableBatch::read(&path, &serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, batch);
        back.verify(&m).unwrap();

        let other = DelayModel::from_weights(vec![1.0; 14]).unwrap();
        assert!(back.verify(&other).is_err());
    }
}
