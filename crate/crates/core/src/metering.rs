//! Smart meter emulator: consumption profiles, per-interval commitments and
//! the signed report table.

use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::group::{GroupParams, PrimeOrderGroup};
use crate::pedersen::{commit, open, Commitment};

pub use ed25519_dalek::VerifyingKey as MeterPublicKey;

/// 15-minute intervals.
pub const INTERVALS_PER_DAY: u32 = 96;

#[derive(Debug, Error)]
pub enum MeteringError {
    #[error("profile must contain at least one interval")]
    EmptyProfile,
    #[error("interval index overflow at i0={i0}, n={n}")]
    IntervalOverflow { i0: u64, n: usize },
    #[error("negative consumption {value} at interval {interval}")]
    NegativeValue { interval: u64, value: i64 },
    #[error("consumption {value} at interval {interval} exceeds 2^32 - 1")]
    ValueTooLarge { interval: u64, value: i64 },
    #[error("no reading for interval {0}")]
    MissingInterval(u64),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected {expected} blinding values, got {actual}")]
    RandomnessLength { expected: usize, actual: usize },
    #[error("malformed key material: {0}")]
    Key(String),
}

/// Consecutive per-interval consumption starting at interval `i0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumptionProfile {
    i0: u64,
    values: Vec<u32>,
}

impl ConsumptionProfile {
    pub fn new(i0: u64, values: Vec<u32>) -> Result<Self, MeteringError> {
        if values.is_empty() {
            return Err(MeteringError::EmptyProfile);
        }
        check_range(i0, values.len())?;
        Ok(Self { i0, values })
    }

    pub fn i0(&self) -> u64 {
        self.i0
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.values.len() as u64).map(move |k| self.i0 + k)
    }
}

pub(crate) fn check_range(i0: u64, n: usize) -> Result<(), MeteringError> {
    i0.checked_add(n as u64)
        .map(|_| ())
        .ok_or(MeteringError::IntervalOverflow { i0, n })
}

/// Where a meter's readings come from.
#[derive(Debug, Clone)]
pub enum ProfileSource {
    Constant(u32),
    /// Household model: day/night base load plus random appliance spikes.
    Synthetic { seed: u64, intervals_per_day: u32 },
    /// CSV text with header `interval,value`.
    Csv(String),
}

impl ProfileSource {
    pub fn synthetic(seed: u64) -> Self {
        ProfileSource::Synthetic {
            seed,
            intervals_per_day: INTERVALS_PER_DAY,
        }
    }

    pub fn csv_file(path: impl AsRef<Path>) -> Result<Self, MeteringError> {
        Ok(ProfileSource::Csv(std::fs::read_to_string(path)?))
    }
}

pub fn generate_profile(
    source: &ProfileSource,
    i0: u64,
    n: usize,
) -> Result<ConsumptionProfile, MeteringError> {
    if n == 0 {
        return Err(MeteringError::EmptyProfile);
    }
    check_range(i0, n)?;
    let values = match source {
        ProfileSource::Constant(level) => vec![*level; n],
        ProfileSource::Synthetic {
            seed,
            intervals_per_day,
        } => (i0..i0 + n as u64)
            .map(|i| synthetic_reading(*seed, *intervals_per_day, i))
            .collect(),
        ProfileSource::Csv(text) => csv_readings(text, i0, n)?,
    };
    ConsumptionProfile::new(i0, values)
}

/// Watt-hours consumed in interval `i`. Depends only on `(seed, i)`, so any
/// window over the same seed sees the same readings.
fn synthetic_reading(seed: u64, intervals_per_day: u32, interval: u64) -> u32 {
    let per_day = u64::from(intervals_per_day.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ interval.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let hour = (interval % per_day) * 24 / per_day;
    // Energy per interval shrinks as intervals get shorter.
    let scale = 96.0 / per_day as f64;
    let base = match hour {
        0..=5 => 45.0,
        6..=8 => 130.0,
        9..=16 => 85.0,
        17..=21 => 190.0,
        _ => 95.0,
    };
    let noise: f64 = rng.gen_range(0.8..1.2);
    let mut wh = base * noise;
    if rng.gen_bool(0.06) {
        // kettle, oven, washing machine
        wh += rng.gen_range(200.0..1200.0);
    }
    (wh * scale).round() as u32
}

fn csv_readings(text: &str, i0: u64, n: usize) -> Result<Vec<u32>, MeteringError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| MeteringError::Csv(e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "interval" || &headers[1] != "value" {
        return Err(MeteringError::Csv(format!(
            "expected header `interval,value`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut values: Vec<Option<u32>> = vec![None; n];
    for record in reader.records() {
        let record = record.map_err(|e| MeteringError::Csv(e.to_string()))?;
        let interval: u64 = record[0]
            .parse()
            .map_err(|e| MeteringError::Csv(format!("interval `{}`: {e}", &record[0])))?;
        let value: i64 = record[1]
            .parse()
            .map_err(|e| MeteringError::Csv(format!("value `{}`: {e}", &record[1])))?;
        if value < 0 {
            return Err(MeteringError::NegativeValue { interval, value });
        }
        let value =
            u32::try_from(value).map_err(|_| MeteringError::ValueTooLarge { interval, value })?;
        if let Some(k) = interval.checked_sub(i0).filter(|&k| k < n as u64) {
            values[k as usize] = Some(value);
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(k, v)| v.ok_or(MeteringError::MissingInterval(i0 + k as u64)))
        .collect()
}

/// Signing identity of one meter.
#[derive(Clone)]
pub struct MeterKeypair {
    meter_id: String,
    signing: SigningKey,
}

impl std::fmt::Debug for MeterKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeterKeypair")
            .field("meter_id", &self.meter_id)
            .field("public", &hex::encode(self.public_key().as_bytes()))
            .finish_non_exhaustive()
    }
}

impl MeterKeypair {
    pub fn generate<R: RngCore + CryptoRng>(meter_id: impl Into<String>, rng: &mut R) -> Self {
        Self {
            meter_id: meter_id.into(),
            signing: SigningKey::generate(rng),
        }
    }

    pub fn from_secret_bytes(meter_id: impl Into<String>, secret: &[u8; 32]) -> Self {
        Self {
            meter_id: meter_id.into(),
            signing: SigningKey::from_bytes(secret),
        }
    }

    pub fn from_secret_hex(meter_id: impl Into<String>, hex_str: &str) -> Result<Self, MeteringError> {
        let bytes = hex::decode(hex_str.trim()).map_err(|e| MeteringError::Key(e.to_string()))?;
        let secret: [u8; 32] = bytes
            .try_into()
            .map_err(|_| MeteringError::Key("secret key must be 32 bytes".into()))?;
        Ok(Self::from_secret_bytes(meter_id, &secret))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.signing.to_bytes())
    }

    pub fn meter_id(&self) -> &str {
        &self.meter_id
    }

    pub fn public_key(&self) -> MeterPublicKey {
        self.signing.verifying_key()
    }
}

pub fn public_key_from_hex(hex_str: &str) -> Result<MeterPublicKey, MeteringError> {
    let bytes = hex::decode(hex_str.trim()).map_err(|e| MeteringError::Key(e.to_string()))?;
    let bytes: [u8; 32] = bytes
        .try_into()
        .map_err(|_| MeteringError::Key("public key must be 32 bytes".into()))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| MeteringError::Key(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow<G: PrimeOrderGroup> {
    pub interval: u64,
    pub value: u32,
    pub commitment: Commitment<G>,
    pub randomness: G::Scalar,
}

/// The meter's report table: columns `i, v_i, Comm_i, r_i` plus a signature
/// over `(i0, COMM)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitmentReport<G: PrimeOrderGroup> {
    pub meter_id: String,
    pub i0: u64,
    pub rows: Vec<ReportRow<G>>,
    pub sig: Vec<u8>,
}

impl<G: PrimeOrderGroup> CommitmentReport<G> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn commitments(&self) -> Vec<Commitment<G>> {
        self.rows.iter().map(|row| row.commitment).collect()
    }

    pub fn randomness(&self) -> Vec<G::Scalar> {
        self.rows.iter().map(|row| row.randomness).collect()
    }

    pub fn profile(&self) -> Result<ConsumptionProfile, MeteringError> {
        ConsumptionProfile::new(self.i0, self.rows.iter().map(|row| row.value).collect())
    }

    /// Rows whose interval is out of sequence or whose commitment does not
    /// open to `(v mod q, r)`.
    pub fn inconsistent_rows(&self, params: &GroupParams<G>) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(k, row)| {
                row.interval != self.i0.wrapping_add(*k as u64)
                    || !open(
                        params,
                        &row.commitment,
                        &G::scalar_from_u64(u64::from(row.value)),
                        &row.randomness,
                    )
            })
            .map(|(k, _)| k)
            .collect()
    }
}

/// Canonical signed bytes: `i0` as big-endian u64 followed by the
/// commitment encodings in row order.
pub fn signing_payload<G: PrimeOrderGroup>(i0: u64, commitments: &[Commitment<G>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + commitments.len() * G::ELEMENT_BYTES);
    out.extend_from_slice(&i0.to_be_bytes());
    for c in commitments {
        out.extend_from_slice(&c.to_bytes());
    }
    out
}

pub fn build_report<G: PrimeOrderGroup, R: RngCore + CryptoRng>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    profile: &ConsumptionProfile,
    rng: &mut R,
) -> Result<CommitmentReport<G>, MeteringError> {
    let randomness = (0..profile.len()).map(|_| G::scalar_random(rng)).collect();
    build_report_with_randomness(params, keys, profile, randomness)
}

/// Like [`build_report`] with caller-chosen blinding values.
pub fn build_report_with_randomness<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    profile: &ConsumptionProfile,
    randomness: Vec<G::Scalar>,
) -> Result<CommitmentReport<G>, MeteringError> {
    build_signed_report(params, keys, profile, randomness).map(|(report, _)| report)
}

/// Builds the report and also returns the exact bytes that were signed, so
/// the caller can serialize the commitment column without encoding it again.
pub fn build_signed_report<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    profile: &ConsumptionProfile,
    randomness: Vec<G::Scalar>,
) -> Result<(CommitmentReport<G>, Vec<u8>), MeteringError> {
    if profile.is_empty() {
        return Err(MeteringError::EmptyProfile);
    }
    if randomness.len() != profile.len() {
        return Err(MeteringError::RandomnessLength {
            expected: profile.len(),
            actual: randomness.len(),
        });
    }
    let rows: Vec<ReportRow<G>> = profile
        .intervals()
        .zip(profile.values())
        .zip(randomness)
        .map(|((interval, &value), r)| ReportRow {
            interval,
            value,
            commitment: commit(params, &G::scalar_from_u64(u64::from(value)), &r),
            randomness: r,
        })
        .collect();
    let comms: Vec<_> = rows.iter().map(|row| row.commitment).collect();
    let payload = signing_payload(profile.i0(), &comms);
    let sig = keys.signing.sign(&payload);
    let report = CommitmentReport {
        meter_id: keys.meter_id.clone(),
        i0: profile.i0(),
        rows,
        sig: sig.to_bytes().to_vec(),
    };
    Ok((report, payload))
}

pub fn verify_report_signature<G: PrimeOrderGroup>(
    pubkey: &MeterPublicKey,
    i0: u64,
    commitments: &[Commitment<G>],
    sig: &[u8],
) -> bool {
    let Ok(sig) = Signature::from_slice(sig) else {
        return false;
    };
    pubkey
        .verify_strict(&signing_payload(i0, commitments), &sig)
        .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Ristretto255, TestElement, TestGroup23, TestScalar};
    use rand_chacha::ChaCha20Rng;

    fn test_keys() -> MeterKeypair {
        MeterKeypair::from_secret_bytes("meter-1", &[7u8; 32])
    }

    #[test]
    fn constant_source() {
        let p = generate_profile(&ProfileSource::Constant(5), 100, 3).unwrap();
        assert_eq!(p.values(), &[5, 5, 5]);
        assert_eq!(p.i0(), 100);
        assert_eq!(p.intervals().collect::<Vec<_>>(), vec![100, 101, 102]);
    }

    #[test]
    fn synthetic_source_is_reproducible_and_window_consistent() {
        let src = ProfileSource::synthetic(42);
        let a = generate_profile(&src, 960, 96).unwrap();
        let b = generate_profile(&src, 960, 96).unwrap();
        assert_eq!(a, b);
        let tail = generate_profile(&src, 1000, 10).unwrap();
        assert_eq!(tail.values(), &a.values()[40..50]);
        let other = generate_profile(&ProfileSource::synthetic(43), 960, 96).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synthetic_evening_exceeds_night() {
        let src = ProfileSource::synthetic(1);
        let p = generate_profile(&src, 0, 96 * 30).unwrap();
        let mean_at = |hour: u64| {
            let vals: Vec<f64> = p
                .values()
                .iter()
                .enumerate()
                .filter(|(k, _)| (*k as u64 % 96) * 24 / 96 == hour)
                .map(|(_, &v)| f64::from(v))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(mean_at(19) > mean_at(3));
    }

    #[test]
    fn csv_source() {
        let text = "interval,value\n10,4\n11,0\n12,9\n13,1\n";
        let p = generate_profile(&ProfileSource::Csv(text.into()), 11, 2).unwrap();
        assert_eq!(p.values(), &[0, 9]);

        let err = generate_profile(&ProfileSource::Csv("interval,value\n0,-2\n".into()), 0, 1);
        assert!(matches!(err, Err(MeteringError::NegativeValue { interval: 0, value: -2 })));

        let err = generate_profile(&ProfileSource::Csv("interval,value\n0,3\n".into()), 0, 2);
        assert!(matches!(err, Err(MeteringError::MissingInterval(1))));

        let err = generate_profile(&ProfileSource::Csv("time,kwh\n0,3\n".into()), 0, 1);
        assert!(matches!(err, Err(MeteringError::Csv(_))));

        let err = generate_profile(&ProfileSource::Csv("interval,value\n0,abc\n".into()), 0, 1);
        assert!(matches!(err, Err(MeteringError::Csv(_))));

        let err = generate_profile(&ProfileSource::Csv("interval,value\n0,4294967296\n".into()), 0, 1);
        assert!(matches!(err, Err(MeteringError::ValueTooLarge { .. })));
    }

    #[test]
    fn empty_profile_is_rejected() {
        assert!(matches!(ConsumptionProfile::new(0, vec![]), Err(MeteringError::EmptyProfile)));
        assert!(matches!(
            generate_profile(&ProfileSource::Constant(1), 0, 0),
            Err(MeteringError::EmptyProfile)
        ));
        assert!(matches!(
            ConsumptionProfile::new(u64::MAX, vec![1, 2]),
            Err(MeteringError::IntervalOverflow { .. })
        ));
    }

    #[test]
    fn test_group_report_with_forced_randomness() {
        let params = GroupParams::<TestGroup23>::standard();
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let report = build_report_with_randomness(
            &params,
            &test_keys(),
            &profile,
            vec![TestScalar::new(5), TestScalar::new(1)],
        )
        .unwrap();
        let six = Commitment(TestElement::new(6).unwrap());
        assert_eq!(report.commitments(), vec![six, six]);
        assert_eq!(report.rows[1].interval, 1);
        assert!(report.inconsistent_rows(&params).is_empty());
        assert!(verify_report_signature(
            &test_keys().public_key(),
            0,
            &report.commitments(),
            &report.sig
        ));
    }

    #[test]
    fn randomness_length_must_match() {
        let params = GroupParams::<TestGroup23>::standard();
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let err = build_report_with_randomness(&params, &test_keys(), &profile, vec![TestScalar::new(5)]);
        assert!(matches!(err, Err(MeteringError::RandomnessLength { expected: 2, actual: 1 })));
    }

    #[test]
    fn reduction_happens_only_inside_commit() {
        let params = GroupParams::<TestGroup23>::standard();
        let profile = ConsumptionProfile::new(0, vec![14]).unwrap();
        let report =
            build_report_with_randomness(&params, &test_keys(), &profile, vec![TestScalar::new(5)]).unwrap();
        assert_eq!(report.rows[0].value, 14);
        // 14 = 3 mod 11
        assert_eq!(report.rows[0].commitment.0.value(), 6);
    }

    #[test]
    fn signature_coverage() {
        let params = GroupParams::<Ristretto255>::standard();
        let keys = test_keys();
        let pk = keys.public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let profile = generate_profile(&ProfileSource::synthetic(3), 96, 96).unwrap();
        let report = build_report(&params, &keys, &profile, &mut rng).unwrap();
        let comms = report.commitments();
        assert!(verify_report_signature(&pk, report.i0, &comms, &report.sig));

        // i0 shifted
        assert!(!verify_report_signature(&pk, report.i0 + 1, &comms, &report.sig));

        // one commitment replaced
        let mut swapped = comms.clone();
        swapped[5] = commit(&params, &Ristretto255::scalar_from_u64(99), &Ristretto255::scalar_one());
        assert!(!verify_report_signature(&pk, report.i0, &swapped, &report.sig));

        // truncated / garbage signature
        assert!(!verify_report_signature(&pk, report.i0, &comms, &report.sig[..63]));
        assert!(!verify_report_signature(&pk, report.i0, &comms, &[0u8; 64]));

        // plaintext columns are not covered
        let mut edited = report.clone();
        edited.rows[0].value += 1;
        edited.rows[1].randomness = Ristretto255::scalar_one();
        assert!(verify_report_signature(&pk, edited.i0, &edited.commitments(), &edited.sig));
        assert_eq!(edited.inconsistent_rows(&params), vec![0, 1]);
    }

    #[test]
    fn rows_open_and_blinding_is_fresh() {
        let params = GroupParams::<Ristretto255>::standard();
        let keys = test_keys();
        let profile = generate_profile(&ProfileSource::Constant(250), 0, 24).unwrap();
        let a = build_report(&params, &keys, &profile, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = build_report(&params, &keys, &profile, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert!(a.inconsistent_rows(&params).is_empty());
        assert!(b.inconsistent_rows(&params).is_empty());
        let ca = a.commitments();
        assert!(b.commitments().iter().all(|c| !ca.contains(c)));
    }

    #[test]
    fn key_hex_round_trip() {
        let keys = test_keys();
        let again = MeterKeypair::from_secret_hex("meter-1", &keys.secret_hex()).unwrap();
        assert_eq!(again.public_key(), keys.public_key());
        let pk = public_key_from_hex(&hex::encode(keys.public_key().as_bytes())).unwrap();
        assert_eq!(pk, keys.public_key());
        assert!(public_key_from_hex("abcd").is_err());
    }
}
