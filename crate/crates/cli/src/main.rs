//! `privbill`: key generation, the three protocol parties, and the
//! simulation, tamper and benchmark drills.
//!
//! Exit status: 0 when every session was accepted (or every tamper
//! rejected), 1 when that property failed, 2 on usage or config errors.

mod commands;
mod config;
mod keys;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use privbill::group::GroupId;

use crate::config::{Mode, Role};

#[derive(Debug, Parser)]
#[command(name = "privbill", version, about = "Privacy-preserving time-of-use billing")]
struct Cli {
    /// `test` allows fixed seeds and test-only switches.
    #[arg(long, value_enum, default_value_t = Mode::Production, global = true)]
    mode: Mode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write meter.key, meter.pub and params.toml into a directory.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "meter-0001")]
        meter_id: String,
        #[arg(long, default_value = "ristretto255", value_parser = parse_group)]
        group: GroupId,
        /// Overwrite existing key files.
        #[arg(long)]
        force: bool,
        /// Derive the key from a seed (test mode only).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one party until terminated (the meter exits after its reports).
    Run {
        #[arg(value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
    },
    /// In-process end-to-end run of meters x days sessions.
    Simulate {
        #[arg(long, default_value_t = 7)]
        days: u32,
        #[arg(long, default_value_t = 10)]
        meters: u32,
        #[arg(long, default_value_t = privbill::metering::INTERVALS_PER_DAY)]
        intervals_per_day: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Tamper with honest transcripts and check the BS rejects each one.
    Tamper {
        #[arg(long, value_enum, default_value_t = commands::Scenario::All)]
        scenario: commands::Scenario,
        /// Mutations per field class.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Largest report length; lengths are drawn from 1..=max-n.
        #[arg(long, default_value_t = 96)]
        max_n: usize,
        /// Enumerate every mutation of small sessions (test group only).
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Verification throughput over a batch of honest billing reports.
    Bench {
        #[arg(long, default_value_t = 1000)]
        batch: usize,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Fraction of reports verified; the rest are skipped.
        #[arg(long, default_value_t = 1.0)]
        sampling_rate: f64,
        /// Rows per report.
        #[arg(long, default_value_t = 96)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value = "ristretto255", value_parser = parse_group)]
    group: GroupId,
    /// Fixed RNG seed (test mode only).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the summary as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_group(s: &str) -> Result<GroupId, String> {
    s.parse().map_err(|e: privbill::group::GroupError| e.to_string())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli.mode, cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
