//! Back-end system (BS): tariff publication, homomorphic bill verification,
//! the verdict ledger and the verification throughput bench.
//!
//! A billing report is accepted iff, in this order:
//!
//! 1. the meter signature over `(i0, COMM)` verifies;
//! 2. the commitment column lines up with the published tariff;
//! 3. the price is below [`price_bound`];
//! 4. `prod_k Comm_k^{t_k}` opens to `(price mod q, r')`.
//!
//! The bound in step 3 keeps `price + q` from verifying: with `q > 2^192`
//! and `price < 2^64` the bill can never wrap around the group order.

pub mod bench;
mod ledger;
mod service;
mod store;

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::{verify_report_signature, CommitmentReport, MeterPublicKey};
use crate::pedersen::{open, weighted_product, Commitment};
use crate::privacy::{compute_price, BillingReport, Tariff};

pub use bench::{bench_verify, BenchItem, BenchReport};
pub use ledger::{Ledger, LedgerEntry, LedgerError, LedgerRecord, SubmissionMode};
pub use service::{BackendService, ServiceError, TariffSchedule};
pub use store::{StoreError, TariffStore};

/// Bills must be strictly below 2^64.
pub fn price_bound() -> BigUint {
    BigUint::from(1u8) << 64
}

/// Machine-readable reason for a rejected report; names the first failed check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadSignature,
    UnknownMeter,
    NoTariff,
    MisalignedInterval,
    LengthMismatch,
    PriceOutOfRange,
    OpeningFailed,
    /// Pass-through table whose plaintext rows do not open their commitments.
    RowOpeningFailed,
}

impl RejectReason {
    pub const ALL: [RejectReason; 8] = [
        RejectReason::BadSignature,
        RejectReason::UnknownMeter,
        RejectReason::NoTariff,
        RejectReason::MisalignedInterval,
        RejectReason::LengthMismatch,
        RejectReason::PriceOutOfRange,
        RejectReason::OpeningFailed,
        RejectReason::RowOpeningFailed,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::BadSignature => "bad_signature",
            RejectReason::UnknownMeter => "unknown_meter",
            RejectReason::NoTariff => "no_tariff",
            RejectReason::MisalignedInterval => "misaligned_interval",
            RejectReason::LengthMismatch => "length_mismatch",
            RejectReason::PriceOutOfRange => "price_out_of_range",
            RejectReason::OpeningFailed => "opening_failed",
            RejectReason::RowOpeningFailed => "row_opening_failed",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RejectReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RejectReason::ALL
            .into_iter()
            .find(|r| r.code() == s)
            .ok_or_else(|| format!("unknown reject reason `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }

    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            Verdict::Accepted => None,
            Verdict::Rejected(r) => Some(*r),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accepted => f.write_str("accepted"),
            Verdict::Rejected(r) => write!(f, "rejected:{r}"),
        }
    }
}

/// `COMM_Tariff = prod_k Comm_k^{t_k}`. Panics on length mismatch.
pub fn aggregate_commitment<G: PrimeOrderGroup>(
    commitments: &[Commitment<G>],
    tariff: &Tariff,
) -> Commitment<G> {
    weighted_product(commitments, &tariff.scalars::<G>())
}

/// Check 4 alone: does the aggregated commitment open to `(price, r')`?
/// Returns false on a length mismatch.
pub fn opening_check<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    tariff: &Tariff,
    commitments: &[Commitment<G>],
    price: &BigUint,
    r_prime: &G::Scalar,
) -> bool {
    if commitments.len() != tariff.len() {
        return false;
    }
    let aggregate = aggregate_commitment(commitments, tariff);
    open(params, &aggregate, &G::scalar_from_biguint(price), r_prime)
}

fn check_alignment(i0: u64, n: usize, tariff: &Tariff) -> Result<(), RejectReason> {
    if tariff.i0() != i0 {
        return Err(RejectReason::MisalignedInterval);
    }
    if tariff.len() != n {
        return Err(RejectReason::LengthMismatch);
    }
    Ok(())
}

pub fn verify_billing<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    pubkey: &MeterPublicKey,
    tariff: &Tariff,
    report: &BillingReport<G>,
) -> Verdict {
    if !verify_report_signature(pubkey, report.i0, &report.commitments, &report.sig) {
        return Verdict::Rejected(RejectReason::BadSignature);
    }
    if let Err(reason) = check_alignment(report.i0, report.len(), tariff) {
        return Verdict::Rejected(reason);
    }
    if report.price >= price_bound() {
        return Verdict::Rejected(RejectReason::PriceOutOfRange);
    }
    if !opening_check(params, tariff, &report.commitments, &report.price, &report.r_prime) {
        return Verdict::Rejected(RejectReason::OpeningFailed);
    }
    Verdict::Accepted
}

/// Verifies an intact meter table (no privacy component on the link) and
/// prices it directly. Returns the price only when accepted.
pub fn verify_pass_through<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    pubkey: &MeterPublicKey,
    tariff: &Tariff,
    report: &CommitmentReport<G>,
) -> (Verdict, Option<BigUint>) {
    let commitments = report.commitments();
    if !verify_report_signature(pubkey, report.i0, &commitments, &report.sig) {
        return (Verdict::Rejected(RejectReason::BadSignature), None);
    }
    if let Err(reason) = check_alignment(report.i0, report.len(), tariff) {
        return (Verdict::Rejected(reason), None);
    }
    if !report.inconsistent_rows(params).is_empty() {
        return (Verdict::Rejected(RejectReason::RowOpeningFailed), None);
    }
    let price = report
        .profile()
        .ok()
        .and_then(|profile| compute_price(&profile, tariff).ok());
    match price {
        Some(p) => (Verdict::Accepted, Some(p)),
        None => (Verdict::Rejected(RejectReason::LengthMismatch), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Ristretto255, TestElement, TestGroup23, TestScalar};
    use crate::metering::{build_report_with_randomness, ConsumptionProfile, MeterKeypair};
    use crate::privacy::transform_report;

    type T = TestGroup23;

    fn keys() -> MeterKeypair {
        MeterKeypair::from_secret_bytes("meter-1", &[7u8; 32])
    }

    fn golden() -> (GroupParams<T>, Tariff, CommitmentReport<T>, BillingReport<T>) {
        let params = GroupParams::<T>::standard();
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let report = build_report_with_randomness(
            &params,
            &keys(),
            &profile,
            vec![TestScalar::new(5), TestScalar::new(1)],
        )
        .unwrap();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let billing = transform_report(&params, &report, &tariff).unwrap().report;
        (params, tariff, report, billing)
    }

    #[test]
    fn golden_aggregate_and_acceptance() {
        let (params, tariff, _, billing) = golden();
        let agg = aggregate_commitment(&billing.commitments, &tariff);
        assert_eq!(agg, Commitment(TestElement::new(2).unwrap()));
        assert_eq!(verify_billing(&params, &keys().public_key(), &tariff, &billing), Verdict::Accepted);
    }

    #[test]
    fn golden_wrong_price_fails_opening() {
        let (params, tariff, _, mut billing) = golden();
        billing.price = BigUint::from(13u32);
        assert_eq!(
            verify_billing(&params, &keys().public_key(), &tariff, &billing),
            Verdict::Rejected(RejectReason::OpeningFailed)
        );
    }

    #[test]
    fn golden_swapped_commitment_fails_signature() {
        let (params, tariff, _, mut billing) = golden();
        billing.commitments[0] =
            crate::pedersen::commit(&params, &TestScalar::new(1), &TestScalar::new(1));
        assert_ne!(billing.commitments[0].0.value(), 6);
        assert_eq!(
            verify_billing(&params, &keys().public_key(), &tariff, &billing),
            Verdict::Rejected(RejectReason::BadSignature)
        );
    }

    #[test]
    fn alignment_and_bound_checks() {
        let (params, tariff, _, billing) = golden();
        let pk = keys().public_key();
        let shifted = Tariff::new(1, vec![2, 3]).unwrap();
        assert_eq!(
            verify_billing(&params, &pk, &shifted, &billing),
            Verdict::Rejected(RejectReason::MisalignedInterval)
        );
        let longer = Tariff::new(0, vec![2, 3, 1]).unwrap();
        assert_eq!(
            verify_billing(&params, &pk, &longer, &billing),
            Verdict::Rejected(RejectReason::LengthMismatch)
        );
        // 12 + 11 * 2^62 still opens mod 11 but is far beyond the bound.
        let mut big = billing.clone();
        big.price = &billing.price + (BigUint::from(11u32) << 62);
        assert!(opening_check(&params, &tariff, &big.commitments, &big.price, &big.r_prime));
        assert_eq!(
            verify_billing(&params, &pk, &tariff, &big),
            Verdict::Rejected(RejectReason::PriceOutOfRange)
        );
    }

    #[test]
    fn wrong_key_fails_signature() {
        let (params, tariff, _, billing) = golden();
        let other = MeterKeypair::from_secret_bytes("meter-2", &[8u8; 32]);
        assert_eq!(
            verify_billing(&params, &other.public_key(), &tariff, &billing),
            Verdict::Rejected(RejectReason::BadSignature)
        );
    }

    #[test]
    fn pass_through_prices_plaintext() {
        let (params, tariff, report, _) = golden();
        let pk = keys().public_key();
        assert_eq!(
            verify_pass_through(&params, &pk, &tariff, &report),
            (Verdict::Accepted, Some(BigUint::from(12u32)))
        );
        let mut bad = report.clone();
        bad.rows[0].value = 4;
        assert_eq!(
            verify_pass_through(&params, &pk, &tariff, &bad).0,
            Verdict::Rejected(RejectReason::RowOpeningFailed)
        );
    }

    #[test]
    fn reason_codes_round_trip() {
        for r in RejectReason::ALL {
            assert_eq!(r.code().parse::<RejectReason>().unwrap(), r);
        }
        assert_eq!(Verdict::Rejected(RejectReason::OpeningFailed).to_string(), "rejected:opening_failed");
    }

    #[test]
    fn production_bound_leaves_headroom() {
        // max bill: 2^16 intervals of (2^32 - 1)^2
        let max_bill = BigUint::from(u32::MAX) * BigUint::from(u32::MAX) * (1u32 << 16);
        assert!(max_bill < Ristretto255::order());
        assert!(price_bound() < Ristretto255::order());
    }
}
