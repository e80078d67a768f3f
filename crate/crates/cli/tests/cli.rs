use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

fn privbill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privbill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn keygen_writes_three_files_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("keys");
    let out_s = out.to_str().unwrap();
    let first = privbill(&["keygen", "--out", out_s, "--meter-id", "m-1"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let mut files: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["meter.key", "meter.pub", "params.toml"]);
    let params = std::fs::read_to_string(out.join("params.toml")).unwrap();
    assert!(params.contains("group_id = \"ristretto255\""), "{params}");

    let again = privbill(&["keygen", "--out", out_s]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let forced = privbill(&["keygen", "--out", out_s, "--force", "--group", "test23"]);
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
    let params = std::fs::read_to_string(out.join("params.toml")).unwrap();
    assert!(params.contains("h = \"09\""), "{params}");
}

#[test]
fn production_mode_refuses_seeds() {
    for args in [
        &["simulate", "--seed", "1"][..],
        &["tamper", "--seed", "1"][..],
        &["bench", "--seed", "1"][..],
        &["keygen", "--out", "/nonexistent", "--seed", "1"][..],
    ] {
        let out = privbill(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr(&out).contains("test"), "{}", stderr(&out));
    }
}

#[test]
fn simulate_week_accepts_everything_and_is_reproducible() {
    let run = || privbill(&["--mode", "test", "simulate", "--days", "7", "--meters", "10", "--seed", "42", "--json"]);
    let a = run();
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let a = json(&a);
    assert_eq!(a["sessions"], 70);
    assert_eq!(a["accepted"], 70);
    assert_eq!(a["rejected"], 0);
    assert_eq!(a["intervals_per_day"], 96);
    let b = json(&run());
    for key in ["total_billed", "ledger_digest", "accepted", "seed"] {
        assert_eq!(a[key], b[key], "{key}");
    }
}

#[test]
fn simulate_table_lists_stage_timings() {
    let out = privbill(&["simulate", "--days", "1", "--meters", "2", "--group", "test23"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for row in ["SM", "PC", "BS", "accepted         2"] {
        assert!(text.contains(row), "{text}");
    }
}

#[test]
fn tamper_all_scenarios_rejected() {
    let out = privbill(&[
        "--mode", "test", "tamper", "--seed", "5", "--count", "10", "--max-n", "8", "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = json(&out);
    assert_eq!(report["all_rejected"], true);
    assert_eq!(report["mutations"], 60);
    assert_eq!(report["by_class"].as_object().unwrap().len(), 6);
}

#[test]
fn tamper_test_group_skips_undetectable_wrap() {
    let out = privbill(&["--mode", "test", "tamper", "--group", "test23", "--seed", "2", "--count", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("undetectable"), "{}", stdout(&out));

    let exhaustive = privbill(&["tamper", "--group", "test23", "--exhaustive", "--count", "5", "--json"]);
    assert_eq!(exhaustive.status.code(), Some(0), "{}", stderr(&exhaustive));
    assert!(json(&exhaustive)["mutations"].as_u64().unwrap() > 10_000);
}

#[test]
fn bench_prints_mean_and_respects_sampling_rate() {
    let out = privbill(&["--mode", "test", "bench", "--batch", "40", "--n", "16", "--seed", "3", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let full = json(&out);
    assert_eq!(full["verified"], 40);
    assert!(full["mean_ms"].as_f64().unwrap() > 0.0);

    let out = privbill(&[
        "--mode", "test", "bench", "--batch", "400", "--n", "4", "--seed", "3", "--sampling-rate", "0.25", "--json",
    ]);
    let sampled = json(&out);
    let verified = sampled["verified"].as_u64().unwrap();
    assert!((60..=140).contains(&verified), "{verified}");
    assert_eq!(sampled["skipped"].as_u64().unwrap() + verified, 400);

    let text = stdout(&privbill(&["bench", "--batch", "10", "--n", "8"]));
    assert!(text.contains("mean verify time"), "{text}");
    assert_eq!(privbill(&["bench", "--sampling-rate", "0"]).status.code(), Some(2));
}

struct Party(Child);

impl Drop for Party {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_party(role: &str, config: &Path) -> Party {
    Party(
        Command::new(env!("CARGO_BIN_EXE_privbill"))
            .args(["--mode", "test", "run", role, "--config", config.to_str().unwrap()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    )
}

fn write_config(dir: &Path, group: &str, pc: u16, bs: u16) -> std::path::PathBuf {
    let text = format!(
        r#"mode = "test"
group_id = "{group}"
seed = 11

[keys]
params = "keys/params.toml"
meter_key = "keys/meter.key"
meter_pubs = ["keys/meter.pub"]

[endpoints]
pc = "127.0.0.1:{pc}"
bs = "127.0.0.1:{bs}"

[pc]
retry_ms = 100

[bs]
ledger = "ledger.jsonl"
"#
    );
    let path = dir.join(format!("{group}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn three_processes_complete_one_billing_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    let gen = privbill(&["keygen", "--out", keys.to_str().unwrap(), "--meter-id", "meter-42"]);
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    let (pc_port, bs_port) = (free_port(), free_port());
    let config = write_config(dir.path(), "ristretto255", pc_port, bs_port);

    let _bs = spawn_party("bs", &config);
    let _pc = spawn_party("pc", &config);
    let start = Instant::now();
    let meter = loop {
        let out = privbill(&["--mode", "test", "run", "meter", "--config", config.to_str().unwrap()]);
        if out.status.success() || start.elapsed() > Duration::from_secs(20) {
            break out;
        }
        thread::sleep(Duration::from_millis(100));
    };
    assert_eq!(meter.status.code(), Some(0), "{}", stderr(&meter));

    let ledger = dir.path().join("ledger.jsonl");
    let records = loop {
        let text = std::fs::read_to_string(&ledger).unwrap_or_default();
        if !text.trim().is_empty() || start.elapsed() > Duration::from_secs(30) {
            break text;
        }
        thread::sleep(Duration::from_millis(50));
    };
    let lines: Vec<serde_json::Value> = records.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1, "{records}");
    assert_eq!(lines[0]["meter_id"], "meter-42");
    assert_eq!(lines[0]["verdict"], "accepted");
    assert!(!records.contains("\"values\"") && !records.contains("randomness"));

    // params and config disagree on the group
    let wrong = write_config(dir.path(), "test23", pc_port, bs_port);
    let out = privbill(&["--mode", "test", "run", "meter", "--config", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
}

#[test]
fn run_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "ristretto255", 1, 2);
    let out = privbill(&["--mode", "test", "run", "bs", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}
