//! The privacy component (PC): sits on the meter link, prices the profile
//! locally and forwards only the bill, the aggregate blinding value and the
//! signed commitment column.

use std::collections::VecDeque;

use log::{debug, info, warn};
use num_bigint::BigUint;
use thiserror::Error;

use crate::backend::Verdict;
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::{check_range, CommitmentReport, ConsumptionProfile};
use crate::pedersen::Commitment;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PricingError {
    #[error("tariff starts at interval {tariff} but profile starts at {profile}")]
    MisalignedStart { profile: u64, tariff: u64 },
    #[error("tariff covers {tariff} intervals but profile has {profile}")]
    LengthMismatch { profile: usize, tariff: usize },
    #[error("tariff must contain at least one rate")]
    EmptyTariff,
    #[error("interval index overflow")]
    IntervalOverflow,
    #[error("report carries no rows")]
    EmptyReport,
}

/// Time-of-use tariff: one non-negative integer rate per interval.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tariff {
    i0: u64,
    rates: Vec<u32>,
}

impl Tariff {
    pub fn new(i0: u64, rates: Vec<u32>) -> Result<Self, PricingError> {
        if rates.is_empty() {
            return Err(PricingError::EmptyTariff);
        }
        check_range(i0, rates.len()).map_err(|_| PricingError::IntervalOverflow)?;
        Ok(Self { i0, rates })
    }

    pub fn i0(&self) -> u64 {
        self.i0
    }

    pub fn rates(&self) -> &[u32] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn scalars<G: PrimeOrderGroup>(&self) -> Vec<G::Scalar> {
        self.rates.iter().map(|&t| G::scalar_from_u64(u64::from(t))).collect()
    }

    /// Copy with rate `k` replaced.
    pub fn with_rate(&self, k: usize, rate: u32) -> Self {
        let mut rates = self.rates.clone();
        rates[k] = rate;
        Self { i0: self.i0, rates }
    }

    fn check_aligned(&self, i0: u64, n: usize) -> Result<(), PricingError> {
        if self.i0 != i0 {
            return Err(PricingError::MisalignedStart {
                profile: i0,
                tariff: self.i0,
            });
        }
        if self.rates.len() != n {
            return Err(PricingError::LengthMismatch {
                profile: n,
                tariff: self.rates.len(),
            });
        }
        Ok(())
    }
}

/// What the PC forwards: no consumption or per-interval randomness slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BillingReport<G: PrimeOrderGroup> {
    pub meter_id: String,
    pub i0: u64,
    /// Exact bill `sum t_k v_k`, never reduced.
    pub price: BigUint,
    /// `sum t_k r_k mod q`.
    pub r_prime: G::Scalar,
    pub commitments: Vec<Commitment<G>>,
    pub sig: Vec<u8>,
}

impl<G: PrimeOrderGroup> BillingReport<G> {
    pub fn len(&self) -> usize {
        self.commitments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commitments.is_empty()
    }
}

/// `P(V, T) = sum_k t_k v_k` as an exact integer.
pub fn compute_price(profile: &ConsumptionProfile, tariff: &Tariff) -> Result<BigUint, PricingError> {
    tariff.check_aligned(profile.i0(), profile.len())?;
    // Each term is below 2^64, so u128 holds any realistic sum exactly.
    let sum: u128 = profile
        .values()
        .iter()
        .zip(tariff.rates())
        .map(|(&v, &t)| u128::from(v) * u128::from(t))
        .sum();
    Ok(BigUint::from(sum))
}

/// `r' = sum_k t_k r_k mod q`.
pub fn compute_r_prime<G: PrimeOrderGroup>(
    randomness: &[G::Scalar],
    tariff: &Tariff,
) -> Result<G::Scalar, PricingError> {
    if randomness.len() != tariff.len() {
        return Err(PricingError::LengthMismatch {
            profile: randomness.len(),
            tariff: tariff.len(),
        });
    }
    Ok(randomness
        .iter()
        .zip(tariff.scalars::<G>())
        .fold(G::scalar_zero(), |acc, (r, t)| G::scalar_add(&acc, &G::scalar_mul(r, &t))))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transformed<G: PrimeOrderGroup> {
    pub report: BillingReport<G>,
    /// Rows that failed the PC's self-check. The report is still produced.
    pub inconsistent_rows: Vec<usize>,
}

/// Prices the intercepted report and strips the `v` and `r` columns.
pub fn transform_report<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    report: &CommitmentReport<G>,
    tariff: &Tariff,
) -> Result<Transformed<G>, PricingError> {
    if report.is_empty() {
        return Err(PricingError::EmptyReport);
    }
    tariff.check_aligned(report.i0, report.len())?;

    let inconsistent_rows = report.inconsistent_rows(params);
    if !inconsistent_rows.is_empty() {
        warn!(
            "step=self_check meter={} i0={} bad_rows={:?}",
            report.meter_id, report.i0, inconsistent_rows
        );
    }

    let profile = report.profile().map_err(|_| PricingError::EmptyReport)?;
    let price = compute_price(&profile, tariff)?;
    let r_prime = compute_r_prime::<G>(&report.randomness(), tariff)?;
    Ok(Transformed {
        report: BillingReport {
            meter_id: report.meter_id.clone(),
            i0: report.i0,
            price,
            r_prime,
            commitments: report.commitments(),
            sig: report.sig.clone(),
        },
        inconsistent_rows,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("back-end unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("back-end refused: {0}")]
    Remote(String),
}

impl LinkError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, LinkError::Unreachable(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("tariff covers [{got_i0}, +{got_n}) but [{want_i0}, +{want_n}) was requested")]
    WrongRange {
        want_i0: u64,
        want_n: usize,
        got_i0: u64,
        got_n: usize,
    },
}

impl FetchError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, FetchError::Link(e) if e.is_retriable())
    }
}

/// What the PC forwards upstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submission<G: PrimeOrderGroup> {
    Billing(BillingReport<G>),
    /// The intact meter table. Not private; test harness only.
    PassThrough(CommitmentReport<G>),
}

/// The PC's connection to the back-end: tariff lookup and report delivery.
pub trait Backhaul<G: PrimeOrderGroup> {
    fn request_tariff(&mut self, meter_id: &str, i0: u64, n: usize) -> Result<Tariff, LinkError>;
    fn submit(&mut self, submission: Submission<G>) -> Result<Verdict, LinkError>;
}

/// Requests the tariff for `[i0, i0 + n)` and checks it covers exactly that range.
pub fn fetch_tariff<G: PrimeOrderGroup, B: Backhaul<G> + ?Sized>(
    link: &mut B,
    meter_id: &str,
    i0: u64,
    n: usize,
) -> Result<Tariff, FetchError> {
    let tariff = link.request_tariff(meter_id, i0, n)?;
    if tariff.i0() != i0 || tariff.len() != n {
        return Err(FetchError::WrongRange {
            want_i0: i0,
            want_n: n,
            got_i0: tariff.i0(),
            got_n: tariff.len(),
        });
    }
    Ok(tariff)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Private,
    /// Forward the meter table unchanged. Discloses the profile.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub meter_id: String,
    pub i0: u64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub meter_id: String,
    pub i0: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlushReport {
    pub delivered: Vec<Delivery>,
    /// Reports that cannot be processed by retrying (bad tariff, refused).
    pub failed: Vec<Failure>,
    /// Set when the link went down; the remaining reports stay queued.
    pub stalled: Option<LinkError>,
}

/// FIFO of intercepted reports for one meter link.
#[derive(Debug)]
pub struct PrivacyComponent<G: PrimeOrderGroup> {
    params: GroupParams<G>,
    mode: ForwardMode,
    pending: VecDeque<CommitmentReport<G>>,
}

impl<G: PrimeOrderGroup> PrivacyComponent<G> {
    pub fn new(params: GroupParams<G>, mode: ForwardMode) -> Self {
        Self {
            params,
            mode,
            pending: VecDeque::new(),
        }
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn enqueue(&mut self, report: CommitmentReport<G>) {
        debug!("step=intercept meter={} i0={} n={}", report.meter_id, report.i0, report.len());
        self.pending.push_back(report);
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Processes queued reports in order until the queue is empty or the
    /// link fails with a retriable error.
    pub fn flush<B: Backhaul<G> + ?Sized>(&mut self, link: &mut B) -> FlushReport {
        let mut out = FlushReport::default();
        while let Some(report) = self.pending.front() {
            match self.forward_one(report, link) {
                Ok(verdict) => {
                    info!(
                        "step=forwarded meter={} i0={} verdict={}",
                        report.meter_id, report.i0, verdict
                    );
                    out.delivered.push(Delivery {
                        meter_id: report.meter_id.clone(),
                        i0: report.i0,
                        verdict,
                    });
                }
                Err(ForwardError::Retry(e)) => {
                    warn!("step=buffer meter={} i0={} error={e}", report.meter_id, report.i0);
                    out.stalled = Some(e);
                    break;
                }
                Err(ForwardError::Fatal(error)) => {
                    warn!("step=drop meter={} i0={} error={error}", report.meter_id, report.i0);
                    out.failed.push(Failure {
                        meter_id: report.meter_id.clone(),
                        i0: report.i0,
                        error,
                    });
                }
            }
            self.pending.pop_front();
        }
        out
    }

    fn forward_one<B: Backhaul<G> + ?Sized>(
        &self,
        report: &CommitmentReport<G>,
        link: &mut B,
    ) -> Result<Verdict, ForwardError> {
        let submission = match self.mode {
            ForwardMode::PassThrough => Submission::PassThrough(report.clone()),
            ForwardMode::Private => {
                let tariff = fetch_tariff(link, &report.meter_id, report.i0, report.len())
                    .map_err(|e| match e {
                        FetchError::Link(l) if l.is_retriable() => ForwardError::Retry(l),
                        other => ForwardError::Fatal(other.to_string()),
                    })?;
                let transformed = transform_report(&self.params, report, &tariff)
                    .map_err(|e| ForwardError::Fatal(e.to_string()))?;
                Submission::Billing(transformed.report)
            }
        };
        link.submit(submission).map_err(|e| {
            if e.is_retriable() {
                ForwardError::Retry(e)
            } else {
                ForwardError::Fatal(e.to_string())
            }
        })
    }
}

enum ForwardError {
    Retry(LinkError),
    Fatal(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{TestElement, TestGroup23, TestScalar};
    use crate::metering::{build_report_with_randomness, MeterKeypair};

    type T = TestGroup23;

    fn sc(v: u64) -> TestScalar {
        TestScalar::new(v)
    }

    fn golden_report() -> CommitmentReport<T> {
        let params = GroupParams::<T>::standard();
        let keys = MeterKeypair::from_secret_bytes("meter-1", &[7u8; 32]);
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        build_report_with_randomness(&params, &keys, &profile, vec![sc(5), sc(1)]).unwrap()
    }

    #[test]
    fn price_examples() {
        let v = ConsumptionProfile::new(0, vec![2, 0, 3]).unwrap();
        let t = Tariff::new(0, vec![5, 7, 4]).unwrap();
        assert_eq!(compute_price(&v, &t).unwrap(), BigUint::from(22u32));

        let zeros = ConsumptionProfile::new(0, vec![0, 0, 0]).unwrap();
        assert_eq!(compute_price(&zeros, &t).unwrap(), BigUint::from(0u32));

        let v = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let t = Tariff::new(0, vec![2, 3]).unwrap();
        assert_eq!(compute_price(&v, &t).unwrap(), BigUint::from(12u32));
    }

    #[test]
    fn price_does_not_wrap() {
        let v = ConsumptionProfile::new(0, vec![u32::MAX; 4]).unwrap();
        let t = Tariff::new(0, vec![u32::MAX; 4]).unwrap();
        let expected = BigUint::from(u32::MAX) * BigUint::from(u32::MAX) * 4u32;
        assert_eq!(compute_price(&v, &t).unwrap(), expected);
    }

    #[test]
    fn price_alignment_errors() {
        let v = ConsumptionProfile::new(10, vec![1, 2]).unwrap();
        assert_eq!(
            compute_price(&v, &Tariff::new(11, vec![1, 1]).unwrap()),
            Err(PricingError::MisalignedStart { profile: 10, tariff: 11 })
        );
        assert_eq!(
            compute_price(&v, &Tariff::new(10, vec![1, 1, 1]).unwrap()),
            Err(PricingError::LengthMismatch { profile: 2, tariff: 3 })
        );
        assert_eq!(Tariff::new(0, vec![]), Err(PricingError::EmptyTariff));
    }

    #[test]
    fn r_prime_examples() {
        let t = Tariff::new(0, vec![2, 3]).unwrap();
        assert_eq!(compute_r_prime::<T>(&[sc(5), sc(1)], &t).unwrap(), sc(2));
        assert_eq!(compute_r_prime::<T>(&[sc(0), sc(0)], &t).unwrap(), sc(0));
        let zero_t = Tariff::new(0, vec![0, 0]).unwrap();
        assert_eq!(compute_r_prime::<T>(&[sc(5), sc(1)], &zero_t).unwrap(), sc(0));
        assert!(compute_r_prime::<T>(&[sc(5)], &t).is_err());
    }

    #[test]
    fn transform_golden() {
        let params = GroupParams::<T>::standard();
        let report = golden_report();
        let out = transform_report(&params, &report, &Tariff::new(0, vec![2, 3]).unwrap()).unwrap();
        assert!(out.inconsistent_rows.is_empty());
        let six = Commitment(TestElement::new(6).unwrap());
        assert_eq!(out.report.price, BigUint::from(12u32));
        assert_eq!(out.report.r_prime, sc(2));
        assert_eq!(out.report.commitments, vec![six, six]);
        assert_eq!(out.report.sig, report.sig);
    }

    #[test]
    fn transform_rejects_misaligned_tariff() {
        let params = GroupParams::<T>::standard();
        let err = transform_report(&params, &golden_report(), &Tariff::new(0, vec![1, 2, 3]).unwrap());
        assert_eq!(err, Err(PricingError::LengthMismatch { profile: 2, tariff: 3 }));
    }

    #[test]
    fn transform_zero_tariff() {
        let params = GroupParams::<T>::standard();
        let out = transform_report(&params, &golden_report(), &Tariff::new(0, vec![0, 0]).unwrap()).unwrap();
        assert_eq!(out.report.price, BigUint::from(0u32));
        assert_eq!(out.report.r_prime, sc(0));
    }

    #[test]
    fn transform_flags_but_forwards_inconsistent_rows() {
        let params = GroupParams::<T>::standard();
        let mut report = golden_report();
        report.rows[1].value = 7;
        let out = transform_report(&params, &report, &Tariff::new(0, vec![2, 3]).unwrap()).unwrap();
        assert_eq!(out.inconsistent_rows, vec![1]);
        assert_eq!(out.report.price, BigUint::from(27u32));
    }

    /// Scripted back-end: a queue of canned tariff answers and a switch to
    /// simulate an outage.
    struct ScriptedLink {
        up: bool,
        tariff: Tariff,
        submitted: Vec<Submission<T>>,
    }

    impl Backhaul<T> for ScriptedLink {
        fn request_tariff(&mut self, _: &str, _: u64, _: usize) -> Result<Tariff, LinkError> {
            if !self.up {
                return Err(LinkError::Unreachable("connection refused".into()));
            }
            Ok(self.tariff.clone())
        }

        fn submit(&mut self, submission: Submission<T>) -> Result<Verdict, LinkError> {
            if !self.up {
                return Err(LinkError::Unreachable("connection refused".into()));
            }
            self.submitted.push(submission);
            Ok(Verdict::Accepted)
        }
    }

    #[test]
    fn fetch_tariff_checks_range() {
        let mut link = ScriptedLink {
            up: true,
            tariff: Tariff::new(0, vec![2, 3]).unwrap(),
            submitted: vec![],
        };
        assert_eq!(fetch_tariff(&mut link, "m", 0, 2).unwrap().len(), 2);
        assert!(matches!(
            fetch_tariff(&mut link, "m", 1, 2),
            Err(FetchError::WrongRange { .. })
        ));
        link.up = false;
        let err = fetch_tariff(&mut link, "m", 0, 2).unwrap_err();
        assert!(err.is_retriable());
    }

    #[test]
    fn outage_buffers_reports_in_order() {
        let mut pc = PrivacyComponent::new(GroupParams::<T>::standard(), ForwardMode::Private);
        let mut link = ScriptedLink {
            up: false,
            tariff: Tariff::new(0, vec![2, 3]).unwrap(),
            submitted: vec![],
        };
        pc.enqueue(golden_report());
        pc.enqueue(golden_report());
        let out = pc.flush(&mut link);
        assert!(out.stalled.is_some());
        assert!(out.delivered.is_empty());
        assert_eq!(pc.pending(), 2);

        link.up = true;
        let out = pc.flush(&mut link);
        assert_eq!(out.delivered.len(), 2);
        assert_eq!(pc.pending(), 0);
        match &link.submitted[0] {
            Submission::Billing(b) => assert_eq!(b.price, BigUint::from(12u32)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_tariff_is_reported_not_retried() {
        let mut pc = PrivacyComponent::new(GroupParams::<T>::standard(), ForwardMode::Private);
        let mut link = ScriptedLink {
            up: true,
            tariff: Tariff::new(0, vec![2, 3, 4]).unwrap(),
            submitted: vec![],
        };
        pc.enqueue(golden_report());
        let out = pc.flush(&mut link);
        assert_eq!(out.failed.len(), 1);
        assert!(link.submitted.is_empty());
        assert_eq!(pc.pending(), 0);
    }

    #[test]
    fn pass_through_forwards_table_intact() {
        let mut pc = PrivacyComponent::new(GroupParams::<T>::standard(), ForwardMode::PassThrough);
        let mut link = ScriptedLink {
            up: true,
            tariff: Tariff::new(0, vec![2, 3]).unwrap(),
            submitted: vec![],
        };
        pc.enqueue(golden_report());
        pc.flush(&mut link);
        assert_eq!(link.submitted, vec![Submission::PassThrough(golden_report())]);
    }
}
