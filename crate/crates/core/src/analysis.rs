//! Security harnesses: the view simulator and its distribution test, the
//! single-field mutation engine, the completeness runner and the decoder
//! fuzzer. Everything here returns plain serializable reports.
//!
//! The simulator only reproduces `(COMM, r')`. The meter signature cannot be
//! produced without the meter key, so simulated views are checked against
//! the opening check alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use num_bigint::BigUint;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::backend::{opening_check, price_bound, verify_billing, RejectReason, Verdict};
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::{build_report, CommitmentReport, ConsumptionProfile, MeterKeypair, MeterPublicKey};
use crate::pedersen::{commit, weighted_product, Commitment};
use crate::privacy::{compute_price, transform_report, BillingReport, Tariff};
use crate::wire::decode_message;

// ---- simulator ----

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimulationError {
    /// Every rate is 0 mod q, so an honest bill is 0 mod q too.
    #[error("price {price} is not reachable: every tariff rate is 0 mod q")]
    UnreachablePrice { price: BigUint },
    #[error("tariff must contain at least one rate")]
    EmptyTariff,
}

/// BS view reconstructed from public data only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedView<G: PrimeOrderGroup> {
    pub commitments: Vec<Commitment<G>>,
    pub r_prime: G::Scalar,
    pub price: BigUint,
}

/// Samples `r'` and all commitments but one uniformly, then solves the pivot
/// commitment so that the tariff-weighted product opens to `(price, r')`.
/// The pivot is the lowest index whose rate is invertible mod q.
pub fn simulate_view<G: PrimeOrderGroup, R: RngCore + CryptoRng>(
    params: &GroupParams<G>,
    tariff: &Tariff,
    price: &BigUint,
    rng: &mut R,
) -> Result<SimulatedView<G>, SimulationError> {
    if tariff.is_empty() {
        return Err(SimulationError::EmptyTariff);
    }
    let rates = tariff.scalars::<G>();
    let pivot = rates
        .iter()
        .enumerate()
        .find_map(|(k, t)| G::scalar_invert(t).map(|inv| (k, inv)));
    let mut commitments: Vec<Commitment<G>> =
        (0..tariff.len()).map(|_| Commitment(G::element_random(rng))).collect();

    let Some((j, t_inv)) = pivot else {
        if G::scalar_from_biguint(price) != G::scalar_zero() {
            return Err(SimulationError::UnreachablePrice { price: price.clone() });
        }
        return Ok(SimulatedView {
            commitments,
            r_prime: G::scalar_zero(),
            price: price.clone(),
        });
    };

    let r_prime = G::scalar_random(rng);
    let target = commit(params, &G::scalar_from_biguint(price), &r_prime);
    let mut others = rates.clone();
    others[j] = G::scalar_zero();
    let rest = weighted_product(&commitments, &others);
    let solved = G::exp(&G::mul(&target.0, &G::invert(&rest.0)), &t_inv);
    commitments[j] = Commitment(solved);
    Ok(SimulatedView {
        commitments,
        r_prime,
        price: price.clone(),
    })
}

/// Simulated views must pass the opening check by construction.
pub fn simulated_view_opens<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    tariff: &Tariff,
    view: &SimulatedView<G>,
) -> bool {
    opening_check(params, tariff, &view.commitments, &view.price, &view.r_prime)
}

fn view_key<G: PrimeOrderGroup>(commitments: &[Commitment<G>], r_prime: &G::Scalar) -> Vec<u8> {
    let mut key: Vec<u8> = commitments.iter().flat_map(|c| c.to_bytes()).collect();
    key.extend_from_slice(&G::scalar_to_bytes(r_prime));
    key
}

#[derive(Debug, Clone, Serialize)]
pub struct ZkReport {
    pub trials: u64,
    pub price: String,
    pub profiles: usize,
    pub cells: usize,
    pub chi_squared: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub total_variation: f64,
    /// Simulated views failing the opening check (must be zero).
    pub simulated_rejects: u64,
}

/// Two-sample chi-squared homogeneity test on cell counts.
/// Returns `(statistic, degrees of freedom, p-value, total variation)`.
pub fn chi_squared_homogeneity(a: &[u64], b: &[u64]) -> (f64, usize, f64, f64) {
    assert_eq!(a.len(), b.len());
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    let mut tv = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let pooled = (x + y) as f64;
        if pooled == 0.0 {
            continue;
        }
        cells += 1;
        let ea = na as f64 * pooled / total;
        let eb = nb as f64 * pooled / total;
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
        tv += (x as f64 / na as f64 - y as f64 / nb as f64).abs();
    }
    let df = cells.saturating_sub(1);
    let p = if df == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(df as f64).expect("df > 0").cdf(stat)
    };
    (stat, df, p, tv / 2.0)
}

/// All profiles with values in `0..=max_value` whose bill is `price`.
pub fn profiles_with_price(tariff: &Tariff, price: &BigUint, max_value: u32) -> Vec<ConsumptionProfile> {
    let n = tariff.len();
    let mut out = Vec::new();
    let mut values = vec![0u32; n];
    loop {
        let profile = ConsumptionProfile::new(tariff.i0(), values.clone()).expect("non-empty");
        if compute_price(&profile, tariff).ok().as_ref() == Some(price) {
            out.push(profile);
        }
        let mut k = 0;
        loop {
            if k == n {
                return out;
            }
            if values[k] < max_value {
                values[k] += 1;
                break;
            }
            values[k] = 0;
            k += 1;
        }
    }
}

/// Compares honest `(COMM, r')` views, over profiles drawn uniformly from
/// `profiles` (all billing `price` under `tariff`) with fresh blinding,
/// against [`simulate_view`].
pub fn zk_distribution_test<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    tariff: &Tariff,
    profiles: &[ConsumptionProfile],
    price: &BigUint,
    trials: u64,
    seed: u64,
) -> ZkReport {
    assert!(!profiles.is_empty(), "need at least one profile with the target price");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut counts: HashMap<Vec<u8>, (u64, u64)> = HashMap::new();
    let mut simulated_rejects = 0;
    for _ in 0..trials {
        let profile = &profiles[rng.gen_range(0..profiles.len())];
        let report = build_report(params, keys, profile, &mut rng).expect("valid profile");
        let billing = transform_report(params, &report, tariff).expect("aligned").report;
        debug_assert_eq!(&billing.price, price);
        counts
            .entry(view_key(&billing.commitments, &billing.r_prime))
            .or_default()
            .0 += 1;

        let view = simulate_view(params, tariff, price, &mut rng).expect("reachable price");
        if !simulated_view_opens(params, tariff, &view) {
            simulated_rejects += 1;
        }
        counts.entry(view_key(&view.commitments, &view.r_prime)).or_default().1 += 1;
    }
    let (honest, simulated): (Vec<u64>, Vec<u64>) = counts.values().copied().unzip();
    let (chi_squared, df, p_value, tv) = chi_squared_homogeneity(&honest, &simulated);
    ZkReport {
        trials,
        price: price.to_string(),
        profiles: profiles.len(),
        cells: counts.len(),
        chi_squared,
        degrees_of_freedom: df,
        p_value,
        total_variation: tv,
        simulated_rejects,
    }
}

// ---- honest sessions ----

/// One complete honest run: what the meter sent and what the PC forwarded.
#[derive(Debug, Clone)]
pub struct HonestSession<G: PrimeOrderGroup> {
    pub pubkey: MeterPublicKey,
    pub tariff: Tariff,
    pub report: CommitmentReport<G>,
    pub billing: BillingReport<G>,
}

pub fn honest_session<G: PrimeOrderGroup, R: RngCore + CryptoRng>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    profile: &ConsumptionProfile,
    tariff: &Tariff,
    rng: &mut R,
) -> HonestSession<G> {
    let report = build_report(params, keys, profile, rng).expect("valid profile");
    let billing = transform_report(params, &report, tariff).expect("aligned tariff").report;
    HonestSession {
        pubkey: keys.public_key(),
        tariff: tariff.clone(),
        report,
        billing,
    }
}

/// Session with random length-`n` consumption (0..=5000) and rates (1..=60)
/// starting at a random interval.
pub fn random_session<G: PrimeOrderGroup, R: RngCore + CryptoRng>(
    params: &GroupParams<G>,
    keys: &MeterKeypair,
    n: usize,
    rng: &mut R,
) -> HonestSession<G> {
    let i0 = rng.gen_range(0..1u64 << 40);
    let values = (0..n).map(|_| rng.gen_range(0..=5000)).collect();
    let rates = (0..n).map(|_| rng.gen_range(1..=60)).collect();
    let profile = ConsumptionProfile::new(i0, values).expect("n > 0");
    let tariff = Tariff::new(i0, rates).expect("n > 0");
    honest_session(params, keys, &profile, &tariff, rng)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompletenessReport {
    pub sessions: usize,
    pub accepted: usize,
    pub rejections: BTreeMap<String, usize>,
    pub min_n: usize,
    pub max_n: usize,
}

/// Runs `sessions` random honest sessions with `n` drawn from `n_range`,
/// in parallel. Session `k` is seeded from `(seed, k)`.
pub fn completeness_run<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    sessions: usize,
    n_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> CompletenessReport {
    let keys = MeterKeypair::from_secret_bytes("meter-completeness", &seed_bytes(seed));
    let outcomes: Vec<(usize, Verdict)> = (0..sessions)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let n = rng.gen_range(n_range.clone());
            let s = random_session(params, &keys, n, &mut rng);
            (n, verify_billing(params, &s.pubkey, &s.tariff, &s.billing))
        })
        .collect();
    let mut rejections = BTreeMap::new();
    for (_, v) in &outcomes {
        if let Some(r) = v.reason() {
            *rejections.entry(r.code().to_string()).or_insert(0) += 1;
        }
    }
    CompletenessReport {
        sessions,
        accepted: outcomes.iter().filter(|(_, v)| v.is_accepted()).count(),
        rejections,
        min_n: outcomes.iter().map(|(n, _)| *n).min().unwrap_or(0),
        max_n: outcomes.iter().map(|(n, _)| *n).max().unwrap_or(0),
    }
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut out);
    out
}

// ---- mutations ----

/// Which field of the honest transcript a mutation changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldClass {
    Price,
    /// `price + q`: only the price bound can catch it.
    PriceWrap,
    RPrime,
    Comm,
    I0,
    /// The PC priced with a tariff that differs from the published one.
    TariffMismatch,
}

impl FieldClass {
    pub const ALL: [FieldClass; 6] = [
        FieldClass::Price,
        FieldClass::PriceWrap,
        FieldClass::RPrime,
        FieldClass::Comm,
        FieldClass::I0,
        FieldClass::TariffMismatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldClass::Price => "price",
            FieldClass::PriceWrap => "price_wrap",
            FieldClass::RPrime => "r_prime",
            FieldClass::Comm => "comm",
            FieldClass::I0 => "i0",
            FieldClass::TariffMismatch => "tariff_mismatch",
        }
    }
}

impl fmt::Display for FieldClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Price,
    PriceWrap,
    RPrime,
    Comm(usize),
    I0,
    Tariff(usize),
}

impl Target {
    pub fn class(self) -> FieldClass {
        match self {
            Target::Price => FieldClass::Price,
            Target::PriceWrap => FieldClass::PriceWrap,
            Target::RPrime => FieldClass::RPrime,
            Target::Comm(_) => FieldClass::Comm,
            Target::I0 => FieldClass::I0,
            Target::Tariff(_) => FieldClass::TariffMismatch,
        }
    }
}

/// A tampered billing report, the tariff the BS verifies it against, and the
/// reason the BS must give.
#[derive(Debug, Clone)]
pub struct Tampered<G: PrimeOrderGroup> {
    pub target: Target,
    pub pubkey: MeterPublicKey,
    pub tariff: Tariff,
    pub billing: BillingReport<G>,
    pub expected: RejectReason,
}

fn price_reason(price: &BigUint) -> RejectReason {
    if *price >= price_bound() {
        RejectReason::PriceOutOfRange
    } else {
        RejectReason::OpeningFailed
    }
}

fn tampered<G: PrimeOrderGroup>(
    session: &HonestSession<G>,
    target: Target,
    billing: BillingReport<G>,
    expected: RejectReason,
) -> Tampered<G> {
    Tampered {
        target,
        pubkey: session.pubkey,
        tariff: session.tariff.clone(),
        billing,
        expected,
    }
}

fn with_price<G: PrimeOrderGroup>(session: &HonestSession<G>, target: Target, price: BigUint) -> Tampered<G> {
    let expected = price_reason(&price);
    let billing = BillingReport {
        price,
        ..session.billing.clone()
    };
    tampered(session, target, billing, expected)
}

fn with_r_prime<G: PrimeOrderGroup>(session: &HonestSession<G>, r_prime: G::Scalar) -> Tampered<G> {
    let billing = BillingReport {
        r_prime,
        ..session.billing.clone()
    };
    tampered(session, Target::RPrime, billing, RejectReason::OpeningFailed)
}

fn with_comm<G: PrimeOrderGroup>(session: &HonestSession<G>, k: usize, c: Commitment<G>) -> Tampered<G> {
    let mut billing = session.billing.clone();
    billing.commitments[k] = c;
    tampered(session, Target::Comm(k), billing, RejectReason::BadSignature)
}

fn with_i0<G: PrimeOrderGroup>(session: &HonestSession<G>, i0: u64) -> Tampered<G> {
    let billing = BillingReport {
        i0,
        ..session.billing.clone()
    };
    tampered(session, Target::I0, billing, RejectReason::BadSignature)
}

/// The PC prices with rate `rate` at `k` instead of the published one.
/// Only detectable when `Comm_k` is not the identity and the rate change is
/// nonzero mod q; returns `None` otherwise.
fn with_tariff_rate<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    session: &HonestSession<G>,
    k: usize,
    rate: u32,
) -> Option<Tampered<G>> {
    let honest_rate = session.tariff.rates()[k];
    let delta = G::scalar_sub(&G::scalar_from_u64(rate.into()), &G::scalar_from_u64(honest_rate.into()));
    if delta == G::scalar_zero() || session.billing.commitments[k] == Commitment::identity() {
        return None;
    }
    let forged = session.tariff.with_rate(k, rate);
    let billing = transform_report(params, &session.report, &forged).ok()?.report;
    let expected = price_reason(&billing.price);
    Some(tampered(session, Target::Tariff(k), billing, expected))
}

fn random_nonzero_scalar<G: PrimeOrderGroup, R: RngCore + CryptoRng>(rng: &mut R) -> G::Scalar {
    loop {
        let s = G::scalar_random(rng);
        if s != G::scalar_zero() {
            return s;
        }
    }
}

/// Changes exactly one field of the honest transcript. Returns `None` when
/// the target is out of range or the change could not be detected by any
/// verifier in this group (see [`with_tariff_rate`] and `PriceWrap`).
pub fn mutate_session<G: PrimeOrderGroup, R: RngCore + CryptoRng>(
    params: &GroupParams<G>,
    session: &HonestSession<G>,
    target: Target,
    rng: &mut R,
) -> Option<Tampered<G>> {
    let n = session.billing.len();
    let q = G::order();
    let price = &session.billing.price;
    match target {
        Target::Price => {
            let cap = if q.bits() > 40 { 1u64 << 40 } else { u64::try_from(&q).unwrap() - 1 };
            let delta = BigUint::from(rng.gen_range(1..=cap));
            let new = if rng.gen_bool(0.5) && *price >= delta {
                price - &delta
            } else {
                price + &delta
            };
            Some(with_price(session, target, new))
        }
        Target::PriceWrap => {
            let wrapped = price + &q;
            // Same residue: accepted unless the bound catches it.
            (wrapped >= price_bound()).then(|| with_price(session, target, wrapped))
        }
        Target::RPrime => {
            let delta = random_nonzero_scalar::<G, _>(rng);
            Some(with_r_prime(session, G::scalar_add(&session.billing.r_prime, &delta)))
        }
        Target::Comm(k) if k < n => loop {
            let c = Commitment(G::element_random(rng));
            if c != session.billing.commitments[k] {
                break Some(with_comm(session, k, c));
            }
        },
        Target::I0 => {
            let delta = rng.gen_range(1..=1u64 << 20);
            let i0 = if rng.gen_bool(0.5) {
                session.billing.i0.wrapping_add(delta)
            } else {
                session.billing.i0.wrapping_sub(delta)
            };
            Some(with_i0(session, i0))
        }
        Target::Tariff(k) if k < n => {
            let honest = session.tariff.rates()[k];
            (0..64).find_map(|_| {
                let rate = if rng.gen_bool(0.5) {
                    honest.saturating_add(rng.gen_range(1..=100))
                } else {
                    honest.saturating_sub(rng.gen_range(1..=100))
                };
                with_tariff_rate(params, session, k, rate)
            })
        }
        Target::Comm(_) | Target::Tariff(_) => None,
    }
}

/// Random target of the given class.
pub fn random_target<R: Rng>(class: FieldClass, n: usize, rng: &mut R) -> Target {
    match class {
        FieldClass::Price => Target::Price,
        FieldClass::PriceWrap => Target::PriceWrap,
        FieldClass::RPrime => Target::RPrime,
        FieldClass::Comm => Target::Comm(rng.gen_range(0..n)),
        FieldClass::I0 => Target::I0,
        FieldClass::TariffMismatch => Target::Tariff(rng.gen_range(0..n)),
    }
}

/// Every detectable single-field mutation of `session` in a small group:
/// each price and `r'` residue, each other element at each row, each rate
/// residue at each row, and a fixed set of shifted start intervals.
pub fn exhaustive_mutations<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    session: &HonestSession<G>,
) -> Vec<Tampered<G>> {
    let q = G::small_order().expect("exhaustive mutation needs a small group");
    let n = session.billing.len();
    let price = &session.billing.price;
    let mut out = Vec::new();

    for d in 1..q {
        out.push(with_price(session, Target::Price, price + d));
        if *price >= BigUint::from(d) {
            out.push(with_price(session, Target::Price, price - d));
        }
    }
    for s in 0..q {
        let alt = G::scalar_from_u64(s);
        if alt != session.billing.r_prime {
            out.push(with_r_prime(session, alt));
        }
    }
    let elements: Vec<Commitment<G>> = (0..q)
        .map(|s| Commitment(G::exp(&G::generator(), &G::scalar_from_u64(s))))
        .collect();
    for k in 0..n {
        for c in &elements {
            if *c != session.billing.commitments[k] {
                out.push(with_comm(session, k, *c));
            }
        }
    }
    let i0 = session.billing.i0;
    let n64 = n as u64;
    for shifted in [
        i0.wrapping_add(1),
        i0.wrapping_sub(1),
        i0.wrapping_add(n64),
        i0.wrapping_sub(n64),
        i0.wrapping_add(96),
        i0 ^ (1 << 63),
    ] {
        out.push(with_i0(session, shifted));
    }
    for k in 0..n {
        let honest = u64::from(session.tariff.rates()[k]);
        for d in 1..q {
            for rate in [honest + d, honest.wrapping_sub(d)] {
                if let Ok(rate) = u32::try_from(rate) {
                    out.extend(with_tariff_rate(params, session, k, rate));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ClassStats {
    pub total: u64,
    pub rejected: u64,
    pub correct_reason: u64,
    pub reasons: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SoundnessReport {
    pub sessions: u64,
    pub mutations: u64,
    pub rejected: u64,
    pub correct_reason: u64,
    /// Requested mutations that are undetectable in this group and were skipped.
    pub not_applicable: u64,
    pub by_class: BTreeMap<FieldClass, ClassStats>,
}

impl SoundnessReport {
    pub fn all_rejected_correctly(&self) -> bool {
        self.mutations > 0 && self.rejected == self.mutations && self.correct_reason == self.mutations
    }

    pub fn merge(&mut self, other: SoundnessReport) {
        self.sessions += other.sessions;
        self.mutations += other.mutations;
        self.rejected += other.rejected;
        self.correct_reason += other.correct_reason;
        self.not_applicable += other.not_applicable;
        for (class, stats) in other.by_class {
            let mine = self.by_class.entry(class).or_default();
            mine.total += stats.total;
            mine.rejected += stats.rejected;
            mine.correct_reason += stats.correct_reason;
            for (r, c) in stats.reasons {
                *mine.reasons.entry(r).or_default() += c;
            }
        }
    }
}

/// Verifies each tampered report and tallies verdicts against the expected
/// reasons.
pub fn judge_mutations<G: PrimeOrderGroup>(params: &GroupParams<G>, cases: &[Tampered<G>]) -> SoundnessReport {
    let verdicts: Vec<Verdict> = cases
        .par_iter()
        .map(|t| verify_billing(params, &t.pubkey, &t.tariff, &t.billing))
        .collect();
    let mut report = SoundnessReport::default();
    for (case, verdict) in cases.iter().zip(verdicts) {
        let stats = report.by_class.entry(case.target.class()).or_default();
        stats.total += 1;
        report.mutations += 1;
        let key = verdict.to_string();
        *stats.reasons.entry(key).or_default() += 1;
        if let Some(reason) = verdict.reason() {
            stats.rejected += 1;
            report.rejected += 1;
            if reason == case.expected {
                stats.correct_reason += 1;
                report.correct_reason += 1;
            }
        }
    }
    report
}

/// The small-group suite: every session of length 1 over all residues of
/// `(v, r, t)`, plus `sampled` random sessions each for lengths 2 and 3,
/// all mutated exhaustively.
pub fn exhaustive_soundness<G: PrimeOrderGroup>(params: &GroupParams<G>, sampled: usize, seed: u64) -> SoundnessReport {
    let q = G::small_order().expect("small group");
    let keys = MeterKeypair::from_secret_bytes("meter-soundness", &seed_bytes(seed));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sessions = Vec::new();
    for v in 0..q {
        for r in 0..q {
            for t in 0..q {
                let profile = ConsumptionProfile::new(0, vec![v as u32]).expect("n = 1");
                let tariff = Tariff::new(0, vec![t as u32]).expect("n = 1");
                let report = crate::metering::build_report_with_randomness(
                    params,
                    &keys,
                    &profile,
                    vec![G::scalar_from_u64(r)],
                )
                .expect("valid");
                let billing = transform_report(params, &report, &tariff).expect("aligned").report;
                sessions.push(HonestSession {
                    pubkey: keys.public_key(),
                    tariff,
                    report,
                    billing,
                });
            }
        }
    }
    for n in [2usize, 3] {
        for _ in 0..sampled {
            let i0 = rng.gen_range(0..10_000);
            let values = (0..n).map(|_| rng.gen_range(0..3 * q as u32)).collect();
            let rates = (0..n).map(|_| rng.gen_range(0..3 * q as u32)).collect();
            let profile = ConsumptionProfile::new(i0, values).expect("n > 0");
            let tariff = Tariff::new(i0, rates).expect("n > 0");
            sessions.push(honest_session(params, &keys, &profile, &tariff, &mut rng));
        }
    }
    let mut report = SoundnessReport::default();
    for chunk in sessions.chunks(256) {
        let cases: Vec<Tampered<G>> = chunk.iter().flat_map(|s| exhaustive_mutations(params, s)).collect();
        let mut part = judge_mutations(params, &cases);
        part.sessions = chunk.len() as u64;
        report.merge(part);
    }
    report
}

/// Random sessions with `n` in `n_range`, each mutated once in a randomly
/// chosen field class.
pub fn sampled_soundness<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    mutations: usize,
    n_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> SoundnessReport {
    let keys = MeterKeypair::from_secret_bytes("meter-soundness", &seed_bytes(seed));
    let results: Vec<Option<Tampered<G>>> = (0..mutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
            let n = rng.gen_range(n_range.clone());
            let session = random_session(params, &keys, n, &mut rng);
            let class = FieldClass::ALL[k % FieldClass::ALL.len()];
            let target = random_target(class, n, &mut rng);
            mutate_session(params, &session, target, &mut rng)
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count() as u64;
    let cases: Vec<Tampered<G>> = results.into_iter().flatten().collect();
    let mut report = judge_mutations(params, &cases);
    report.sessions = mutations as u64;
    report.not_applicable = skipped;
    report
}

// ---- decoder fuzzing ----

#[derive(Debug, Clone, Default, Serialize)]
pub struct FuzzReport {
    pub iterations: u64,
    pub decoded: u64,
    pub errors: u64,
    pub panics: u64,
    pub error_kinds: BTreeMap<String, u64>,
}

fn mutate_bytes<R: Rng>(frame: &[u8], rng: &mut R) -> Vec<u8> {
    let mut out = frame.to_vec();
    let edits = rng.gen_range(1..=4);
    for _ in 0..edits {
        let len = out.len();
        match rng.gen_range(0..7) {
            0 if len > 0 => {
                let i = rng.gen_range(0..len);
                out[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if len > 0 => {
                let i = rng.gen_range(0..len);
                out[i] = rng.gen();
            }
            2 => {
                let i = rng.gen_range(0..=len);
                out.insert(i, rng.gen());
            }
            3 if len > 0 => {
                out.remove(rng.gen_range(0..len));
            }
            4 => out.truncate(rng.gen_range(0..=len)),
            5 if len > 0 => {
                let a = rng.gen_range(0..len);
                let b = rng.gen_range(a..=len.min(a + 16));
                let chunk = out[a..b].to_vec();
                let at = rng.gen_range(0..=len);
                out.splice(at..at, chunk);
            }
            // length-ish fields: header length and early payload bytes
            _ if len > 12 => {
                let i = rng.gen_range(6..len.min(40));
                out[i] = [0x00, 0xff, 0x7f, 0x80, 0x01][rng.gen_range(0..5)];
            }
            _ => {}
        }
    }
    out
}

fn error_kind(debug: &str) -> String {
    debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or("")
        .to_string()
}

/// Feeds mutated copies of `seeds` to the decoder and counts panics.
pub fn fuzz_decoder<G: PrimeOrderGroup>(seeds: &[Vec<u8>], iterations: u64, seed: u64) -> FuzzReport {
    assert!(!seeds.is_empty());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for _ in 0..iterations {
        let base = &seeds[rng.gen_range(0..seeds.len())];
        let frame = mutate_bytes(base, &mut rng);
        report.iterations += 1;
        match catch_unwind(AssertUnwindSafe(|| decode_message::<G>(&frame))) {
            Ok(Ok(_)) => report.decoded += 1,
            Ok(Err(e)) => {
                report.errors += 1;
                *report.error_kinds.entry(error_kind(&format!("{e:?}"))).or_default() += 1;
            }
            Err(_) => report.panics += 1,
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Ristretto255, TestElement, TestGroup23, TestScalar};
    use crate::metering::build_report_with_randomness;
    use crate::wire::{encode_message, Message};

    type T = TestGroup23;

    fn keys() -> MeterKeypair {
        MeterKeypair::from_secret_bytes("meter-1", &[7u8; 32])
    }

    fn golden_session() -> (GroupParams<T>, HonestSession<T>) {
        let params = GroupParams::<T>::standard();
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let report =
            build_report_with_randomness(&params, &keys(), &profile, vec![TestScalar::new(5), TestScalar::new(1)])
                .unwrap();
        let billing = transform_report(&params, &report, &tariff).unwrap().report;
        let session = HonestSession {
            pubkey: keys().public_key(),
            tariff,
            report,
            billing,
        };
        (params, session)
    }

    #[test]
    fn simulated_golden_views_always_open() {
        let params = GroupParams::<T>::standard();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let price = BigUint::from(12u32);
        for seed in 0..2000 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let view = simulate_view(&params, &tariff, &price, &mut rng).unwrap();
            assert!(simulated_view_opens(&params, &tariff, &view));
        }
    }

    #[test]
    fn simulator_pivots_past_zero_rates() {
        let params = GroupParams::<T>::standard();
        // 11 and 22 are 0 mod q, so the pivot is the last row
        let tariff = Tariff::new(5, vec![11, 22, 4]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let view = simulate_view(&params, &tariff, &BigUint::from(8u32), &mut rng).unwrap();
            assert!(simulated_view_opens(&params, &tariff, &view));
        }
    }

    #[test]
    fn all_zero_rates_force_zero_price() {
        let params = GroupParams::<T>::standard();
        let tariff = Tariff::new(0, vec![0, 11]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let view = simulate_view(&params, &tariff, &BigUint::from(22u32), &mut rng).unwrap();
        assert_eq!(view.r_prime, TestScalar::new(0));
        assert!(simulated_view_opens(&params, &tariff, &view));
        assert!(matches!(
            simulate_view(&params, &tariff, &BigUint::from(5u32), &mut rng),
            Err(SimulationError::UnreachablePrice { .. })
        ));
    }

    #[test]
    fn production_simulated_view_opens() {
        let params = GroupParams::<Ristretto255>::standard();
        let tariff = Tariff::new(0, (1..=8).collect()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let view = simulate_view(&params, &tariff, &BigUint::from(123_456u32), &mut rng).unwrap();
        assert!(simulated_view_opens(&params, &tariff, &view));
    }

    #[test]
    fn chi_squared_oracle() {
        // scipy.stats.chi2_contingency([[10, 20, 30], [20, 20, 20]], correction=False)
        // statistic 5.3333, dof 2, p 0.069483
        let (stat, df, p, tv) = chi_squared_homogeneity(&[10, 20, 30], &[20, 20, 20]);
        assert!((stat - 5.333_333_333).abs() < 1e-6);
        assert_eq!(df, 2);
        assert!((p - 0.069_483_451).abs() < 1e-6);
        assert!((tv - 1.0 / 6.0).abs() < 1e-12);
        let (_, df, p, _) = chi_squared_homogeneity(&[5, 0], &[7, 0]);
        assert_eq!((df, p), (0, 1.0));
    }

    #[test]
    fn golden_price_profiles() {
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let found = profiles_with_price(&tariff, &BigUint::from(12u32), 10);
        let values: Vec<&[u32]> = found.iter().map(|p| p.values()).collect();
        assert_eq!(values, vec![&[6u32, 0][..], &[3, 2], &[0, 4]]);
    }

    #[test]
    fn small_zk_run_matches() {
        let params = GroupParams::<T>::standard();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let price = BigUint::from(12u32);
        let profiles = profiles_with_price(&tariff, &price, 10);
        let report = zk_distribution_test(&params, &keys(), &tariff, &profiles, &price, 20_000, 5);
        assert_eq!(report.cells, 121);
        assert_eq!(report.simulated_rejects, 0);
        assert!(report.p_value > 0.01, "{report:?}");
    }

    #[test]
    fn distinguishable_distributions_are_flagged() {
        // r' pinned to 0 differs from the honest view: the test must notice.
        let params = GroupParams::<T>::standard();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let profile = ConsumptionProfile::new(0, vec![3, 2]).unwrap();
        let mut counts: HashMap<Vec<u8>, (u64, u64)> = HashMap::new();
        for _ in 0..5000 {
            let s = honest_session(&params, &keys(), &profile, &tariff, &mut rng);
            counts.entry(view_key(&s.billing.commitments, &s.billing.r_prime)).or_default().0 += 1;
            let mut v = simulate_view(&params, &tariff, &BigUint::from(12u32), &mut rng).unwrap();
            v.r_prime = TestScalar::new(0);
            counts.entry(view_key(&v.commitments, &v.r_prime)).or_default().1 += 1;
        }
        let (a, b): (Vec<u64>, Vec<u64>) = counts.values().copied().unzip();
        assert!(chi_squared_homogeneity(&a, &b).2 < 1e-6);
    }

    #[test]
    fn golden_mutations_have_expected_reasons() {
        let (params, session) = golden_session();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let price = with_price(&session, Target::Price, BigUint::from(13u32));
        assert_eq!(price.expected, RejectReason::OpeningFailed);
        for target in [Target::Price, Target::RPrime, Target::Comm(0), Target::Comm(1), Target::I0, Target::Tariff(0)] {
            let t = mutate_session(&params, &session, target, &mut rng).unwrap();
            let verdict = verify_billing(&params, &t.pubkey, &t.tariff, &t.billing);
            assert_eq!(verdict, Verdict::Rejected(t.expected), "{target:?}");
        }
        // price + 11 has the same residue and is far below the bound
        assert!(mutate_session(&params, &session, Target::PriceWrap, &mut rng).is_none());
    }

    #[test]
    fn identity_commitment_blocks_tariff_mutation() {
        let params = GroupParams::<T>::standard();
        let profile = ConsumptionProfile::new(0, vec![0, 1]).unwrap();
        let tariff = Tariff::new(0, vec![2, 3]).unwrap();
        let report =
            build_report_with_randomness(&params, &keys(), &profile, vec![TestScalar::new(0), TestScalar::new(1)])
                .unwrap();
        assert_eq!(report.rows[0].commitment.0, TestElement::new(1).unwrap());
        let billing = transform_report(&params, &report, &tariff).unwrap().report;
        let session = HonestSession {
            pubkey: keys().public_key(),
            tariff,
            report,
            billing,
        };
        assert!(with_tariff_rate(&params, &session, 0, 7).is_none());
        assert!(with_tariff_rate(&params, &session, 1, 3 + 11).is_none());
        assert!(with_tariff_rate(&params, &session, 1, 4).is_some());
    }

    #[test]
    fn golden_exhaustive_suite() {
        let (params, session) = golden_session();
        let cases = exhaustive_mutations(&params, &session);
        // price: 10 up, 10 down; r': 10; comm: 2 x 10; i0: 6; tariff: 2 rows x (10 up + 2 or 10 down)
        assert_eq!(cases.len(), 10 + 10 + 10 + 20 + 6 + (10 + 2) + (10 + 3));
        let report = judge_mutations(&params, &cases);
        assert!(report.all_rejected_correctly(), "{report:#?}");
    }

    #[test]
    fn production_price_wrap_hits_the_bound() {
        let params = GroupParams::<Ristretto255>::standard();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let session = random_session(&params, &keys(), 4, &mut rng);
        let t = mutate_session(&params, &session, Target::PriceWrap, &mut rng).unwrap();
        assert_eq!(t.expected, RejectReason::PriceOutOfRange);
        assert_eq!(
            verify_billing(&params, &t.pubkey, &t.tariff, &t.billing),
            Verdict::Rejected(RejectReason::PriceOutOfRange)
        );
    }

    #[test]
    fn small_sampled_production_suite() {
        let params = GroupParams::<Ristretto255>::standard();
        let report = sampled_soundness(&params, 60, 1..=8, 11);
        assert_eq!(report.not_applicable, 0);
        assert!(report.all_rejected_correctly(), "{report:#?}");
    }

    #[test]
    fn small_completeness_run() {
        let params = GroupParams::<Ristretto255>::standard();
        let report = completeness_run(&params, 40, 1..=96, 1);
        assert_eq!(report.accepted, 40);
    }

    #[test]
    fn fuzzing_counts_and_never_panics() {
        let (_, session) = golden_session();
        let seeds = vec![
            encode_message(&Message::MeterReport(session.report.clone())).unwrap(),
            encode_message(&Message::BillingReport(session.billing.clone())).unwrap(),
        ];
        let report = fuzz_decoder::<T>(&seeds, 3000, 1);
        assert_eq!(report.iterations, 3000);
        assert_eq!(report.panics, 0);
        assert_eq!(report.decoded + report.errors, 3000);
        assert!(report.errors > 2000);
    }
}
