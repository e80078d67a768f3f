use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::info;
use privbill::analysis::{
    exhaustive_soundness, judge_mutations, mutate_session, random_session, random_target, FieldClass,
    SoundnessReport, Tampered,
};
use privbill::backend::bench::{bench_verify, BenchItem, BenchReport};
use privbill::backend::{BackendService, Ledger, TariffSchedule};
use privbill::group::{GroupId, GroupParams, PrimeOrderGroup, Ristretto255, TestGroup23};
use privbill::metering::{build_report, generate_profile, MeterKeypair, ProfileSource};
use privbill::node::{send_meter_frame, spawn_backend, spawn_privacy_proxy, RemoteBackhaul};
use privbill::privacy::ForwardMode;
use privbill::sim::{os_seed, simulate, SimConfig, SimSummary};
use privbill::wire::{encode_message, Message};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::config::{Config, Mode, Role};
use crate::keys;
use crate::Command;

/// Verification throughput the deployment has to sustain.
const DAILY_FLOOR: f64 = 25_000.0;

/// Runs `$body` with `$g` bound to the group type named by `$id`.
macro_rules! with_group {
    ($id:expr, $g:ident => $body:expr) => {
        match $id {
            GroupId::Ristretto255 => {
                type $g = Ristretto255;
                $body
            }
            GroupId::TestGroup23 => {
                type $g = TestGroup23;
                $body
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    All,
    Price,
    PriceWrap,
    RPrime,
    Comm,
    I0,
    TariffMismatch,
}

impl Scenario {
    fn classes(self) -> Vec<FieldClass> {
        match self {
            Scenario::All => FieldClass::ALL.to_vec(),
            Scenario::Price => vec![FieldClass::Price],
            Scenario::PriceWrap => vec![FieldClass::PriceWrap],
            Scenario::RPrime => vec![FieldClass::RPrime],
            Scenario::Comm => vec![FieldClass::Comm],
            Scenario::I0 => vec![FieldClass::I0],
            Scenario::TariffMismatch => vec![FieldClass::TariffMismatch],
        }
    }
}

/// Returns whether the command's property held.
pub fn dispatch(mode: Mode, command: Command) -> Result<bool> {
    match command {
        Command::Keygen {
            out,
            meter_id,
            group,
            force,
            seed,
        } => {
            let seed = seed_flag(mode, seed)?;
            let keys = match seed {
                Some(s) => MeterKeypair::generate(meter_id, &mut ChaCha20Rng::seed_from_u64(s)),
                None => MeterKeypair::generate(meter_id, &mut rand::rngs::OsRng),
            };
            let written = with_group!(group, G => keys::write_keyfiles(&out, &keys, &GroupParams::<G>::standard(), force)?);
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Run { role, config } => run(mode, role, &config),
        Command::Simulate {
            days,
            meters,
            intervals_per_day,
            common,
        } => {
            if intervals_per_day == 0 {
                bail!("--intervals-per-day must be positive");
            }
            let seed = resolve_seed(mode, common.seed)?;
            let mut config = SimConfig::new(days, meters, seed);
            config.intervals_per_day = intervals_per_day;
            let summary = with_group!(common.group, G => simulate(&GroupParams::<G>::standard(), &config)?);
            print_simulation(&summary, seed, common.json)?;
            Ok(summary.all_accepted())
        }
        Command::Tamper {
            scenario,
            count,
            max_n,
            exhaustive,
            common,
        } => {
            if max_n == 0 {
                bail!("--max-n must be positive");
            }
            let seed = resolve_seed(mode, common.seed)?;
            let report = with_group!(common.group, G => {
                let params = GroupParams::<G>::standard();
                if exhaustive {
                    if G::small_order().is_none() {
                        bail!("--exhaustive needs a small group (test23)");
                    }
                    if scenario != Scenario::All {
                        bail!("--exhaustive always covers every scenario");
                    }
                    exhaustive_soundness(&params, count, seed)
                } else {
                    tamper::<G>(&params, &scenario.classes(), count, max_n, seed)
                }
            });
            print_tamper(&report, common.group, seed, common.json)?;
            Ok(report.all_rejected_correctly())
        }
        Command::Bench {
            batch,
            workers,
            sampling_rate,
            n,
            common,
        } => {
            if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
                bail!("--sampling-rate must be in (0, 1]");
            }
            if batch == 0 || n == 0 {
                bail!("--batch and --n must be positive");
            }
            let seed = resolve_seed(mode, common.seed)?;
            let report = with_group!(common.group, G => {
                let params = GroupParams::<G>::standard();
                let items = bench_batch::<G>(&params, batch, n, seed);
                bench_verify(&params, &items, workers, sampling_rate, seed)
            });
            print_bench(&report, common.group, n, common.json)?;
            Ok(report.accepted == report.verified)
        }
    }
}

fn seed_flag(mode: Mode, seed: Option<u64>) -> Result<Option<u64>> {
    if seed.is_some() && mode != Mode::Test {
        bail!("--seed is only accepted with --mode test");
    }
    Ok(seed)
}

fn resolve_seed(mode: Mode, seed: Option<u64>) -> Result<u64> {
    Ok(seed_flag(mode, seed)?.unwrap_or_else(os_seed))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xd6e8_feb8_6659_fd93)
}

fn meter_keys(seed: u64, label: &str) -> MeterKeypair {
    MeterKeypair::generate(label, &mut ChaCha20Rng::seed_from_u64(seed))
}

fn tamper<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    classes: &[FieldClass],
    count: usize,
    max_n: usize,
    seed: u64,
) -> SoundnessReport {
    let keys = meter_keys(seed, "meter-tamper");
    let jobs: Vec<(usize, FieldClass, usize)> = classes
        .iter()
        .enumerate()
        .flat_map(|(c, class)| (0..count).map(move |k| (c, *class, k)))
        .collect();
    let results: Vec<Option<Tampered<G>>> = jobs
        .par_iter()
        .map(|&(c, class, k)| {
            let mut rng = ChaCha20Rng::seed_from_u64(mix(seed, c as u64 + 1, k as u64));
            let n = rand::Rng::gen_range(&mut rng, 1..=max_n);
            let session = random_session(params, &keys, n, &mut rng);
            let target = random_target(class, n, &mut rng);
            mutate_session(params, &session, target, &mut rng)
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count() as u64;
    let cases: Vec<Tampered<G>> = results.into_iter().flatten().collect();
    let mut report = judge_mutations(params, &cases);
    report.sessions = jobs.len() as u64;
    report.not_applicable = skipped;
    report
}

fn bench_batch<G: PrimeOrderGroup>(params: &GroupParams<G>, batch: usize, n: usize, seed: u64) -> Vec<BenchItem<G>> {
    let keys = meter_keys(seed, "meter-bench");
    (0..batch)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha20Rng::seed_from_u64(mix(seed, 0, k as u64));
            let s = random_session(params, &keys, n, &mut rng);
            BenchItem {
                pubkey: s.pubkey,
                tariff: s.tariff,
                report: s.billing,
            }
        })
        .collect()
}

fn print_simulation(s: &SimSummary, seed: u64, json: bool) -> Result<()> {
    if json {
        let mut value = serde_json::to_value(s)?;
        value["seed"] = seed.into();
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    println!("group            {}", s.group);
    println!("seed             {seed}");
    println!("meters x days    {} x {} (n = {})", s.meters, s.days, s.intervals_per_day);
    println!("sessions         {}", s.sessions);
    println!("accepted         {}", s.accepted);
    println!("rejected         {}", s.rejected);
    println!("total billed     {}", s.total_billed);
    println!("ledger digest    {}", s.ledger_digest);
    println!();
    println!("{:<6}{:>10}{:>12}{:>12}{:>12}", "stage", "count", "mean ms", "p50 ms", "max ms");
    for (name, st) in [("SM", &s.timings.sm), ("PC", &s.timings.pc), ("BS", &s.timings.bs)] {
        println!(
            "{:<6}{:>10}{:>12.3}{:>12.3}{:>12.3}",
            name, st.count, st.mean_ms, st.p50_ms, st.max_ms
        );
    }
    Ok(())
}

fn print_tamper(r: &SoundnessReport, group: GroupId, seed: u64, json: bool) -> Result<()> {
    if json {
        let mut value = serde_json::to_value(r)?;
        value["group"] = group.as_str().into();
        value["seed"] = seed.into();
        value["all_rejected"] = r.all_rejected_correctly().into();
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    println!("group {group}, seed {seed}, {} sessions", r.sessions);
    println!("{:<18}{:>9}{:>10}{:>10}  verdicts", "scenario", "total", "rejected", "correct");
    for (class, st) in &r.by_class {
        let verdicts: Vec<String> = st.reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{:<18}{:>9}{:>10}{:>10}  {}",
            class.name(),
            st.total,
            st.rejected,
            st.correct_reason,
            verdicts.join(" ")
        );
    }
    println!(
        "{:<18}{:>9}{:>10}{:>10}",
        "all", r.mutations, r.rejected, r.correct_reason
    );
    if r.not_applicable > 0 {
        println!("{} requested mutations are undetectable in {group} and were skipped", r.not_applicable);
    }
    Ok(())
}

fn print_bench(r: &BenchReport, group: GroupId, n: usize, json: bool) -> Result<()> {
    if json {
        let mut value = serde_json::to_value(r)?;
        value["group"] = group.as_str().into();
        value["n"] = n.into();
        value["meets_daily_floor"] = (r.sessions_per_day >= DAILY_FLOOR).into();
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    println!("group              {group}");
    println!("rows per report    {n}");
    println!("batch / workers    {} / {}", r.batch, r.workers);
    println!("sampling rate      {}", r.sampling_rate);
    println!("verified/skipped   {} / {}", r.verified, r.skipped);
    println!("accepted           {}", r.accepted);
    println!("wall time          {:.3} s", r.wall_secs);
    println!("mean verify time   {:.3} ms", r.mean_ms);
    println!("p50 / p90 / p99    {:.3} / {:.3} / {:.3} ms", r.p50_ms, r.p90_ms, r.p99_ms);
    println!("max                {:.3} ms", r.max_ms);
    println!("throughput         {:.1} /s", r.throughput_per_sec);
    println!(
        "sessions per day   {:.0} ({} {DAILY_FLOOR:.0})",
        r.sessions_per_day,
        if r.sessions_per_day >= DAILY_FLOOR { ">=" } else { "<" }
    );
    Ok(())
}

// ---- long-running parties ----

fn run(mode: Mode, role: Role, path: &Path) -> Result<bool> {
    let config = Config::load(path)?;
    if config.mode != mode && mode == Mode::Test {
        bail!("--mode test given but {} sets mode = production", path.display());
    }
    config.validate(role)?;
    let group = config.group()?;
    let in_file = keys::read_group_id(&config.keys.params)?;
    if in_file != group {
        bail!("config group_id {group} does not match params file group {in_file}");
    }
    with_group!(group, G => {
        let params = keys::load_params::<G>(&config.keys.params)?;
        match role {
            Role::Meter => run_meter::<G>(&config, &params),
            Role::Pc => run_pc::<G>(&config, params),
            Role::Bs => run_bs::<G>(&config, params),
        }
    })
}

fn run_meter<G: PrimeOrderGroup>(config: &Config, params: &GroupParams<G>) -> Result<bool> {
    let key_path = config.keys.meter_key.as_ref().context("keys.meter_key")?;
    let keys = keys::load_keypair(key_path)?;
    let seed = config.seed;
    let source = match &config.meter.profile_csv {
        Some(csv) => ProfileSource::csv_file(csv)?,
        None => ProfileSource::Synthetic {
            seed: seed.unwrap_or_else(os_seed),
            intervals_per_day: config.intervals_per_day,
        },
    };
    let per_day = u64::from(config.intervals_per_day);
    let first = config.meter.start_day;
    for day in first..first + config.meter.days {
        let i0 = day.checked_mul(per_day).context("start interval overflows")?;
        let profile = generate_profile(&source, i0, per_day as usize)?;
        let mut rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(mix(s, 1, day)),
            None => {
                let mut bytes = [0u8; 32];
                rand::rngs::OsRng.fill_bytes(&mut bytes);
                ChaCha20Rng::from_seed(bytes)
            }
        };
        let report = build_report(params, &keys, &profile, &mut rng)?;
        let frame = encode_message(&Message::MeterReport(report))?;
        send_meter_frame::<G>(&config.endpoints.pc, &frame)
            .with_context(|| format!("sending report for i0={i0} to {}", config.endpoints.pc))?;
        info!(
            "step=report role=meter meter={} i0={i0} n={per_day} pc={}",
            keys.meter_id(),
            config.endpoints.pc
        );
        if config.meter.period_ms > 0 && day + 1 < first + config.meter.days {
            std::thread::sleep(Duration::from_millis(config.meter.period_ms));
        }
    }
    Ok(true)
}

fn run_pc<G: PrimeOrderGroup>(config: &Config, params: GroupParams<G>) -> Result<bool> {
    let mut link = RemoteBackhaul::new(config.endpoints.bs.clone());
    if let Some(t) = &config.endpoints.tariff {
        link = link.with_tariff_endpoint(t.clone());
    }
    let mode = if config.pc.pass_through {
        ForwardMode::PassThrough
    } else {
        ForwardMode::Private
    };
    let handle = spawn_privacy_proxy(
        &config.endpoints.pc,
        params,
        mode,
        link,
        Duration::from_millis(config.pc.retry_ms),
    )
    .with_context(|| format!("binding {}", config.endpoints.pc))?;
    handle.join();
    Ok(true)
}

fn run_bs<G: PrimeOrderGroup>(config: &Config, params: GroupParams<G>) -> Result<bool> {
    let ledger = match &config.bs.ledger {
        Some(path) => Ledger::open(path)?,
        None => Ledger::in_memory(),
    };
    info!("step=ledger role=bs records={}", ledger.records().len());
    let mut service =
        BackendService::new(params, ledger).with_schedule(TariffSchedule::time_of_use(config.intervals_per_day));
    for path in &config.keys.meter_pubs {
        let (id, key) = keys::load_public(path)?;
        info!("step=register role=bs meter={id}");
        service.register_meter(id, key);
    }
    let handle = spawn_backend(&config.endpoints.bs, service)
        .with_context(|| format!("binding {}", config.endpoints.bs))?;
    handle.join();
    Ok(true)
}
