//! In-process end-to-end run: every meter-day goes SM -> PC -> BS through
//! the wire codec, with each stage timed separately.

use std::time::Instant;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendService, Ledger, ServiceError, TariffSchedule, Verdict};
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::{build_signed_report, generate_profile, MeterKeypair, MeteringError, ProfileSource};
use crate::privacy::{transform_report, PricingError};
use crate::wire::{decode_message, encode_message, encode_meter_frame, Message, TariffMessage, WireError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Metering(#[from] MeteringError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub days: u32,
    pub meters: u32,
    pub intervals_per_day: u32,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(days: u32, meters: u32, seed: u64) -> Self {
        Self {
            days,
            meters,
            intervals_per_day: crate::metering::INTERVALS_PER_DAY,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub max_ms: f64,
    pub total_ms: f64,
}

impl StageStats {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        ms.sort_by(f64::total_cmp);
        let total: f64 = ms.iter().sum();
        Self {
            count: ms.len(),
            mean_ms: total / ms.len() as f64,
            p50_ms: ms[(ms.len() - 1) / 2],
            max_ms: ms[ms.len() - 1],
            total_ms: total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTimings {
    pub sm: StageStats,
    pub pc: StageStats,
    pub bs: StageStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub group: String,
    pub days: u32,
    pub meters: u32,
    pub intervals_per_day: u32,
    pub sessions: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub total_billed: String,
    /// SHA-256 over the ledger records without their timestamps.
    pub ledger_digest: String,
    pub timings: StageTimings,
}

impl SimSummary {
    pub fn all_accepted(&self) -> bool {
        self.sessions > 0 && self.accepted == self.sessions
    }

    /// Everything except timings; identical across runs with one seed.
    pub fn fingerprint(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            self.group,
            self.days,
            self.meters,
            self.sessions,
            self.accepted,
            self.rejected,
            self.total_billed,
            self.ledger_digest
        )
    }
}

fn derive_seed(seed: u64, label: &[u8], index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label);
    h.update(index.to_be_bytes());
    h.finalize().into()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs `meters x days` sessions of `intervals_per_day` rows each.
pub fn simulate<G: PrimeOrderGroup>(params: &GroupParams<G>, config: &SimConfig) -> Result<SimSummary, SimError> {
    let per_day = config.intervals_per_day;
    let mut bs = BackendService::new(params.clone(), Ledger::in_memory())
        .with_schedule(TariffSchedule::time_of_use(per_day));
    let meters: Vec<(MeterKeypair, ProfileSource)> = (0..config.meters)
        .map(|m| {
            let id = format!("meter-{m:04}");
            let keys = MeterKeypair::from_secret_bytes(id, &derive_seed(config.seed, b"key", m.into()));
            let source = ProfileSource::Synthetic {
                seed: u64::from_be_bytes(derive_seed(config.seed, b"load", m.into())[..8].try_into().unwrap()),
                intervals_per_day: per_day,
            };
            (keys, source)
        })
        .collect();
    for (keys, _) in &meters {
        bs.register_meter(keys.meter_id(), keys.public_key());
    }

    let mut sm_ms = Vec::new();
    let mut pc_ms = Vec::new();
    let mut bs_ms = Vec::new();
    let mut accepted = 0;
    let mut rejected = 0;
    let mut billed = BigUint::default();

    for day in 0..config.days {
        let i0 = u64::from(day) * u64::from(per_day);
        for (m, (keys, source)) in meters.iter().enumerate() {
            let mut rng = ChaCha20Rng::from_seed(derive_seed(
                config.seed,
                b"blind",
                (u64::from(day) << 32) | m as u64,
            ));

            // SM: read, commit, sign, serialize
            let t = Instant::now();
            let profile = generate_profile(source, i0, per_day as usize)?;
            let blinding = (0..profile.len()).map(|_| G::scalar_random(&mut rng)).collect();
            let (report, signed) = build_signed_report(params, keys, &profile, blinding)?;
            let meter_frame = encode_meter_frame(&report, &signed)?;
            sm_ms.push(ms_since(t));

            // tariff served by BS, carried as a wire message
            let tariff = bs.serve_tariff(keys.meter_id(), i0, per_day as usize)?;
            let tariff_frame = encode_message::<G>(&Message::Tariff(TariffMessage {
                meter_id: keys.meter_id().to_string(),
                tariff,
            }))?;

            // PC: parse, price, strip, serialize
            let t = Instant::now();
            let Message::MeterReport(intercepted) = decode_message::<G>(&meter_frame)? else {
                return Err(SimError::Unexpected("non-report"));
            };
            let Message::Tariff(TariffMessage { tariff, .. }) = decode_message::<G>(&tariff_frame)? else {
                return Err(SimError::Unexpected("non-tariff"));
            };
            let billing = transform_report(params, &intercepted, &tariff)?.report;
            let billing_frame = encode_message(&Message::BillingReport(billing))?;
            pc_ms.push(ms_since(t));

            // BS: parse, verify, record
            let t = Instant::now();
            let Message::BillingReport(received) = decode_message::<G>(&billing_frame)? else {
                return Err(SimError::Unexpected("non-billing"));
            };
            let verdict = bs.receive_billing(&received)?;
            bs_ms.push(ms_since(t));

            if verdict == Verdict::Accepted {
                accepted += 1;
                billed += &received.price;
            } else {
                rejected += 1;
            }
        }
    }

    let mut digest = Sha256::new();
    for record in bs.ledger().records() {
        let mut value = serde_json::to_value(record).expect("record serializes");
        value.as_object_mut().expect("object").remove("timestamp_ms");
        digest.update(value.to_string().as_bytes());
        digest.update(b"\n");
    }

    Ok(SimSummary {
        group: G::ID.to_string(),
        days: config.days,
        meters: config.meters,
        intervals_per_day: per_day,
        sessions: accepted + rejected,
        accepted,
        rejected,
        total_billed: billed.to_string(),
        ledger_digest: hex::encode(digest.finalize()),
        timings: StageTimings {
            sm: StageStats::from_samples(sm_ms),
            pc: StageStats::from_samples(pc_ms),
            bs: StageStats::from_samples(bs_ms),
        },
    })
}

/// Fresh seed from the OS, for runs outside test mode.
pub fn os_seed() -> u64 {
    rand::rngs::OsRng.next_u64()
}
