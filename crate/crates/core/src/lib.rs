//! Arbiter PUF simulation under voltage and temperature variation,
//! delay-model enrollment, model-guided selection of reliable challenges
//! and reliability evaluation.
//!
//! Sign convention throughout: a positive delay difference (top path
//! slower) produces response bit 0; an exact tie produces 1.

pub mod apuf;
pub mod error;
pub mod eval;
pub mod filter;
pub mod model;
pub mod synth;

pub use apuf::{
    random_challenge, ApufInstance, Challenge, Envelope, OperatingCondition, RandomInstanceParams, ResponseBit,
    StageDelays,
};
pub use error::{Error, Result};
pub use eval::{
    ber_at_dt, ber_sweep, calibrate_noise, full_report, measure_ber, randomness, BerAtDt, BerCount, ConditionGrid,
    EvalConfig, EvalReport,
};
pub use filter::{crp_loss, generate_reliable, loss_to_delta, select, FilterDecision, ReliableBatch};
pub use model::{collect_crps, feature_transform, train, CrpDataset, CrpRecord, DelayModel, TrainConfig};
pub use synth::{build_synthetic_apuf, parse_ro_dataset, RoMeasurementSet, StageAssignment};
