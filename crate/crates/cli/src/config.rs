//! Run configuration, read from TOML and checked before any socket is opened.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use privbill::group::GroupId;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Production,
    /// Deterministic seeds and test-only switches are allowed.
    Test,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub mode: Mode,
    pub group_id: String,
    #[serde(default = "default_intervals")]
    pub intervals_per_day: u32,
    #[serde(default = "default_sampling")]
    pub sampling_rate: f64,
    pub seed: Option<u64>,
    pub keys: KeyPaths,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub meter: MeterSection,
    #[serde(default)]
    pub pc: PcSection,
    #[serde(default)]
    pub bs: BsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyPaths {
    pub params: PathBuf,
    pub meter_key: Option<PathBuf>,
    #[serde(default)]
    pub meter_pubs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    /// Meter-facing listener of the PC; the meter connects here.
    pub pc: String,
    pub bs: String,
    /// Where the PC fetches tariffs; defaults to `bs`.
    pub tariff: Option<String>,
    /// Only `none` is implemented; links carry plain frames.
    #[serde(default = "default_encryption")]
    pub link_encryption: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSection {
    #[serde(default)]
    pub start_day: u64,
    #[serde(default = "one")]
    pub days: u64,
    /// Pause between consecutive reports.
    #[serde(default)]
    pub period_ms: u64,
    /// CSV file with `interval,value` rows; synthetic load when absent.
    pub profile_csv: Option<PathBuf>,
}

impl Default for MeterSection {
    fn default() -> Self {
        Self {
            start_day: 0,
            days: 1,
            period_ms: 0,
            profile_csv: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcSection {
    #[serde(default = "default_retry")]
    pub retry_ms: u64,
    /// Forward meter tables unpriced. Test mode only.
    #[serde(default)]
    pub pass_through: bool,
}

impl Default for PcSection {
    fn default() -> Self {
        Self {
            retry_ms: default_retry(),
            pass_through: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsSection {
    /// Append-only ledger file; in memory when absent.
    pub ledger: Option<PathBuf>,
}

fn default_intervals() -> u32 {
    privbill::metering::INTERVALS_PER_DAY
}

fn default_sampling() -> f64 {
    1.0
}

fn default_encryption() -> String {
    "none".into()
}

fn default_retry() -> u64 {
    2000
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Meter,
    Pc,
    Bs,
}

impl Config {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.keys.params);
        self.keys.meter_key.as_mut().map(fix);
        self.keys.meter_pubs.iter_mut().for_each(fix);
        self.meter.profile_csv.as_mut().map(fix);
        self.bs.ledger.as_mut().map(fix);
    }

    pub fn group(&self) -> Result<GroupId> {
        Ok(self.group_id.parse()?)
    }

    /// Checks everything `role` needs before starting.
    pub fn validate(&self, role: Role) -> Result<()> {
        self.group()?;
        if self.intervals_per_day == 0 {
            bail!("intervals_per_day must be positive");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            bail!("sampling_rate must be in (0, 1], got {}", self.sampling_rate);
        }
        if self.mode == Mode::Production {
            if self.seed.is_some() {
                bail!("seed is only accepted in test mode");
            }
            if self.pc.pass_through {
                bail!("pc.pass_through is only accepted in test mode");
            }
        }
        if self.endpoints.link_encryption != "none" {
            bail!(
                "endpoints.link_encryption = {:?} is not supported; only \"none\"",
                self.endpoints.link_encryption
            );
        }
        check_endpoint("endpoints.pc", &self.endpoints.pc)?;
        check_endpoint("endpoints.bs", &self.endpoints.bs)?;
        if let Some(t) = &self.endpoints.tariff {
            check_endpoint("endpoints.tariff", t)?;
        }
        require_file("keys.params", &self.keys.params)?;
        match role {
            Role::Meter => {
                let key = self.keys.meter_key.as_ref().context("keys.meter_key is required for the meter")?;
                require_file("keys.meter_key", key)?;
                if let Some(csv) = &self.meter.profile_csv {
                    require_file("meter.profile_csv", csv)?;
                }
                if self.meter.days == 0 {
                    bail!("meter.days must be positive");
                }
            }
            Role::Pc => {
                if self.pc.retry_ms == 0 {
                    bail!("pc.retry_ms must be positive");
                }
            }
            Role::Bs => {
                if self.keys.meter_pubs.is_empty() {
                    bail!("keys.meter_pubs must list at least one meter");
                }
                for p in &self.keys.meter_pubs {
                    require_file("keys.meter_pubs", p)?;
                }
                if self.sampling_rate < 1.0 {
                    bail!("the live BS verifies every report; sampling_rate applies to bench only");
                }
                if let Some(ledger) = &self.bs.ledger {
                    let dir = ledger.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                    if !dir.is_dir() {
                        bail!("bs.ledger directory {} does not exist", dir.display());
                    }
                }
            }
        }
        Ok(())
    }
}

fn require_file(field: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{field}: {} does not exist", path.display());
    }
    Ok(())
}

/// `host:port` with a non-empty host and a numeric port.
pub fn check_endpoint(field: &str, addr: &str) -> Result<()> {
    let Some((host, port)) = addr.rsplit_once(':') else {
        bail!("{field}: expected host:port, got {addr:?}");
    };
    if host.is_empty() || host.chars().any(char::is_whitespace) {
        bail!("{field}: bad host in {addr:?}");
    }
    if port.parse::<u16>().is_err() {
        bail!("{field}: bad port in {addr:?}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_need_host_and_port() {
        assert!(check_endpoint("x", "127.0.0.1:7401").is_ok());
        assert!(check_endpoint("x", "[::1]:7401").is_ok());
        assert!(check_endpoint("x", "localhost").is_err());
        assert!(check_endpoint("x", ":7401").is_err());
        assert!(check_endpoint("x", "host:99999").is_err());
    }

    #[test]
    fn production_refuses_seed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("params.toml"), "").unwrap();
        let text = r#"
            group_id = "ristretto255"
            seed = 3
            [keys]
            params = "params.toml"
            [endpoints]
            pc = "127.0.0.1:1"
            bs = "127.0.0.1:2"
        "#;
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let mut config = Config::load(&path).unwrap();
        assert!(config.validate(Role::Pc).unwrap_err().to_string().contains("test mode"));
        config.mode = Mode::Test;
        config.validate(Role::Pc).unwrap();
        assert!(config.validate(Role::Bs).is_err());
        config.endpoints.link_encryption = "tls".into();
        assert!(config.validate(Role::Pc).is_err());
    }
}
