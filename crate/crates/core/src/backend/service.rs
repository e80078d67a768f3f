use std::collections::HashMap;

use log::info;
use thiserror::Error;

use super::ledger::{commitment_digest, Ledger, LedgerEntry, LedgerError, SubmissionMode};
use super::store::{StoreError, TariffStore};
use super::{verify_billing, verify_pass_through, RejectReason, Verdict};
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::{verify_report_signature, CommitmentReport, MeterPublicKey};
use crate::privacy::{Backhaul, BillingReport, LinkError, PricingError, Submission, Tariff};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Tariff(#[from] PricingError),
}

/// Repeating daily rate schedule from which per-range tariffs are published
/// on first request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TariffSchedule {
    daily_rates: Vec<u32>,
}

impl TariffSchedule {
    pub fn new(daily_rates: Vec<u32>) -> Result<Self, PricingError> {
        if daily_rates.is_empty() {
            return Err(PricingError::EmptyTariff);
        }
        Ok(Self { daily_rates })
    }

    /// Cheap nights, a morning shoulder and an evening peak.
    pub fn time_of_use(intervals_per_day: u32) -> Self {
        let per_day = intervals_per_day.max(1);
        let rates = (0..per_day)
            .map(|slot| match slot * 24 / per_day {
                0..=5 => 18,
                6..=16 => 30,
                17..=20 => 42,
                _ => 26,
            })
            .collect();
        Self { daily_rates: rates }
    }

    pub fn daily_rates(&self) -> &[u32] {
        &self.daily_rates
    }

    pub fn tariff_for(&self, i0: u64, n: usize) -> Result<Tariff, PricingError> {
        let len = self.daily_rates.len() as u64;
        let rates = (0..n as u64)
            .map(|k| self.daily_rates[((i0.wrapping_add(k)) % len) as usize])
            .collect();
        Tariff::new(i0, rates)
    }
}

/// The BS party: meter key registry, tariff store and ledger.
#[derive(Debug)]
pub struct BackendService<G: PrimeOrderGroup> {
    params: GroupParams<G>,
    meters: HashMap<String, MeterPublicKey>,
    store: TariffStore,
    ledger: Ledger,
    schedule: Option<TariffSchedule>,
}

impl<G: PrimeOrderGroup> BackendService<G> {
    pub fn new(params: GroupParams<G>, ledger: Ledger) -> Self {
        Self {
            params,
            meters: HashMap::new(),
            store: TariffStore::new(),
            ledger,
            schedule: None,
        }
    }

    pub fn with_schedule(mut self, schedule: TariffSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn params(&self) -> &GroupParams<G> {
        &self.params
    }

    pub fn register_meter(&mut self, meter_id: impl Into<String>, key: MeterPublicKey) {
        self.meters.insert(meter_id.into(), key);
    }

    pub fn publish_tariff(&mut self, meter_id: &str, tariff: Tariff) -> Result<(), StoreError> {
        self.store.publish(meter_id, tariff)
    }

    pub fn serve_tariff(&mut self, meter_id: &str, i0: u64, n: usize) -> Result<Tariff, ServiceError> {
        if !self.store.is_published(meter_id, i0, n) {
            if let Some(schedule) = &self.schedule {
                self.store.publish(meter_id, schedule.tariff_for(i0, n)?)?;
            }
        }
        Ok(self.store.serve(meter_id, i0, n)?)
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn receive_billing(&mut self, report: &BillingReport<G>) -> Result<Verdict, ServiceError> {
        let verdict = self.judge_billing(report);
        let record = self.ledger.append(LedgerEntry::from_billing(report, verdict))?;
        info!(
            "step=verify meter={} i0={} n={} verdict={} duplicate={}",
            report.meter_id,
            report.i0,
            report.len(),
            verdict,
            record.duplicate
        );
        Ok(verdict)
    }

    fn judge_billing(&self, report: &BillingReport<G>) -> Verdict {
        let Some(key) = self.meters.get(&report.meter_id) else {
            return Verdict::Rejected(RejectReason::UnknownMeter);
        };
        match self.store.get(&report.meter_id, report.i0, report.len()) {
            Some(tariff) => verify_billing(&self.params, key, tariff, report),
            None if !verify_report_signature(key, report.i0, &report.commitments, &report.sig) => {
                Verdict::Rejected(RejectReason::BadSignature)
            }
            None => Verdict::Rejected(RejectReason::NoTariff),
        }
    }

    /// Intact meter table: verified and priced here. The plaintext columns
    /// are discarded after pricing.
    pub fn receive_pass_through(&mut self, report: &CommitmentReport<G>) -> Result<Verdict, ServiceError> {
        let commitments = report.commitments();
        let (verdict, price) = match self.meters.get(&report.meter_id) {
            None => (Verdict::Rejected(RejectReason::UnknownMeter), None),
            Some(key) => match self.store.get(&report.meter_id, report.i0, report.len()) {
                Some(tariff) => verify_pass_through(&self.params, key, tariff, report),
                None => (Verdict::Rejected(RejectReason::NoTariff), None),
            },
        };
        self.ledger.append(LedgerEntry {
            meter_id: report.meter_id.clone(),
            i0: report.i0,
            n: report.len(),
            price: price.map(|p| p.to_string()),
            r_prime: None,
            comm_digest: commitment_digest(report.i0, &commitments),
            sig: hex::encode(&report.sig),
            mode: SubmissionMode::PassThrough,
            verdict,
        })?;
        info!("step=verify_pass_through meter={} i0={} verdict={}", report.meter_id, report.i0, verdict);
        Ok(verdict)
    }
}

impl<G: PrimeOrderGroup> Backhaul<G> for BackendService<G> {
    fn request_tariff(&mut self, meter_id: &str, i0: u64, n: usize) -> Result<Tariff, LinkError> {
        self.serve_tariff(meter_id, i0, n)
            .map_err(|e| LinkError::Remote(e.to_string()))
    }

    fn submit(&mut self, submission: Submission<G>) -> Result<Verdict, LinkError> {
        let result = match &submission {
            Submission::Billing(report) => self.receive_billing(report),
            Submission::PassThrough(report) => self.receive_pass_through(report),
        };
        result.map_err(|e| LinkError::Remote(e.to_string()))
    }
}
