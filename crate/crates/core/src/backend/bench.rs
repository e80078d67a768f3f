use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::verify_billing;
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::metering::MeterPublicKey;
use crate::privacy::{BillingReport, Tariff};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// One pre-generated verification job.
#[derive(Debug, Clone)]
pub struct BenchItem<G: PrimeOrderGroup> {
    pub pubkey: MeterPublicKey,
    pub tariff: Tariff,
    pub report: BillingReport<G>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub workers: usize,
    pub sampling_rate: f64,
    pub verified: usize,
    pub skipped: usize,
    pub accepted: usize,
    pub wall_secs: f64,
    /// Verified reports per wall-clock second.
    pub throughput_per_sec: f64,
    /// Reports the batch path covers per day, counting skipped ones.
    pub sessions_per_day: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Verifies a batch on `workers` threads. With `sampling_rate < 1` each
/// report is checked with that probability (seeded) and the rest are
/// skipped.
pub fn bench_verify<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    batch: &[BenchItem<G>],
    workers: usize,
    sampling_rate: f64,
    seed: u64,
) -> BenchReport {
    let workers = workers.max(1);
    let rate = sampling_rate.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected: Vec<&BenchItem<G>> = batch
        .iter()
        .filter(|_| rate >= 1.0 || rng.gen_bool(rate))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let start = Instant::now();
    let results: Vec<(bool, Duration)> = pool.install(|| {
        selected
            .par_iter()
            .map(|item| {
                let t = Instant::now();
                let ok = verify_billing(params, &item.pubkey, &item.tariff, &item.report).is_accepted();
                (ok, t.elapsed())
            })
            .collect()
    });
    let wall = start.elapsed().as_secs_f64();

    let mut latencies: Vec<f64> = results.iter().map(|(_, d)| d.as_secs_f64() * 1e3).collect();
    latencies.sort_by(f64::total_cmp);
    let verified = results.len();
    let mean_ms = if verified == 0 {
        0.0
    } else {
        latencies.iter().sum::<f64>() / verified as f64
    };
    let throughput = if wall > 0.0 { verified as f64 / wall } else { 0.0 };
    let coverage = if verified == 0 { 0.0 } else { batch.len() as f64 / verified as f64 };

    BenchReport {
        batch: batch.len(),
        workers,
        sampling_rate: rate,
        verified,
        skipped: batch.len() - verified,
        accepted: results.iter().filter(|(ok, _)| *ok).count(),
        wall_secs: wall,
        throughput_per_sec: throughput,
        sessions_per_day: throughput * coverage * SECONDS_PER_DAY,
        mean_ms,
        p50_ms: percentile(&latencies, 0.50),
        p90_ms: percentile(&latencies, 0.90),
        p99_ms: percentile(&latencies, 0.99),
        max_ms: latencies.last().copied().unwrap_or(0.0),
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
