//! Append-only verdict ledger, persisted as one JSON object per line.
//!
//! The record schema has no slot for consumption values or per-interval
//! randomness; unknown fields are rejected when a ledger is loaded.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::Verdict;
use crate::group::PrimeOrderGroup;
use crate::metering::signing_payload;
use crate::pedersen::Commitment;
use crate::privacy::BillingReport;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line}: {source}")]
    Corrupt {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionMode {
    Privacy,
    PassThrough,
}

/// What the caller supplies; the ledger adds sequence, duplicate flag and
/// timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub meter_id: String,
    pub i0: u64,
    pub n: usize,
    pub price: Option<String>,
    pub r_prime: Option<String>,
    pub comm_digest: String,
    pub sig: String,
    pub mode: SubmissionMode,
    pub verdict: Verdict,
}

impl LedgerEntry {
    pub fn from_billing<G: PrimeOrderGroup>(report: &BillingReport<G>, verdict: Verdict) -> Self {
        Self {
            meter_id: report.meter_id.clone(),
            i0: report.i0,
            n: report.len(),
            price: Some(report.price.to_string()),
            r_prime: Some(hex::encode(G::scalar_to_bytes(&report.r_prime))),
            comm_digest: commitment_digest(report.i0, &report.commitments),
            sig: hex::encode(&report.sig),
            mode: SubmissionMode::Privacy,
            verdict,
        }
    }
}

/// SHA-256 over the signed `(i0, COMM)` bytes, hex encoded.
pub fn commitment_digest<G: PrimeOrderGroup>(i0: u64, commitments: &[Commitment<G>]) -> String {
    hex::encode(Sha256::digest(signing_payload(i0, commitments)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerRecord {
    pub seq: u64,
    pub meter_id: String,
    pub i0: u64,
    pub n: usize,
    /// Decimal bill, absent when the submission was rejected before pricing.
    pub price: Option<String>,
    pub r_prime: Option<String>,
    pub comm_digest: String,
    pub sig: String,
    pub mode: SubmissionMode,
    pub verdict: String,
    pub reason: Option<String>,
    pub duplicate: bool,
    pub timestamp_ms: u64,
}

impl LedgerRecord {
    /// Every key a serialized record carries.
    pub const FIELDS: [&'static str; 13] = [
        "seq",
        "meter_id",
        "i0",
        "n",
        "price",
        "r_prime",
        "comm_digest",
        "sig",
        "mode",
        "verdict",
        "reason",
        "duplicate",
        "timestamp_ms",
    ];

    pub fn accepted(&self) -> bool {
        self.verdict == "accepted"
    }
}

#[derive(Debug)]
pub struct Ledger {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<LedgerRecord>,
    seen: HashSet<(String, u64)>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            records: Vec::new(),
            seen: HashSet::new(),
        }
    }

    /// Opens or creates a ledger file, replaying existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LedgerRecord = serde_json::from_str(&line)
                    .map_err(|source| LedgerError::Corrupt { line: idx + 1, source })?;
                records.push(record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let seen = records.iter().map(|r| (r.meter_id.clone(), r.i0)).collect();
        Ok(Self {
            path: Some(path),
            file: Some(file),
            records,
            seen,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<LedgerRecord, LedgerError> {
        let key = (entry.meter_id.clone(), entry.i0);
        let duplicate = self.seen.contains(&key);
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let record = LedgerRecord {
            seq: self.records.len() as u64,
            meter_id: entry.meter_id,
            i0: entry.i0,
            n: entry.n,
            price: entry.price,
            r_prime: entry.r_prime,
            comm_digest: entry.comm_digest,
            sig: entry.sig,
            mode: entry.mode,
            verdict: if entry.verdict.is_accepted() { "accepted" } else { "rejected" }.to_string(),
            reason: entry.verdict.reason().map(|r| r.code().to_string()),
            duplicate,
            timestamp_ms,
        };
        if let Some(file) = self.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.seen.insert(key);
        self.records.push(record.clone());
        Ok(record)
    }
}
