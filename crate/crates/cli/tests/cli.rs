//! End-to-end runs of the `nudge` binary on a small study.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use tempfile::TempDir;

const SMALL_STUDY: &str = r#"
n_users = 4
seed = 3

[spans]
modeling_days = 4
break_days = 0
baseline_days = 1
intervention_days = 4
"#;

fn nudge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nudge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One simulated study shared by the tests that read its outputs.
fn simulated() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("sim.toml");
        std::fs::write(&config, SMALL_STUDY).unwrap();
        let out = dir.path().join("sim");
        let stdout = ok(nudge(&["simulate", "--config", s(&config), "--out", s(&out)]));
        assert!(stdout.contains("simulated 4 users"), "{stdout}");
        dir
    })
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn simulate_writes_log_records_schedule_and_report() {
    let out = simulated().path().join("sim");
    for f in ["log.ndjson", "records.ndjson", "schedule.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    for f in ["per_user.csv", "per_arm.csv", "per_block.csv", "usage.csv", "summary.json"] {
        assert!(out.join("report").join(f).is_file(), "report/{f} missing");
    }
    let schedule = std::fs::read_to_string(out.join("schedule.csv")).unwrap();
    // Header plus a row per user and study day; arms only on the four
    // intervention days.
    assert_eq!(schedule.lines().count(), 1 + 4 * 9, "{schedule}");
    let with_arm = schedule.lines().skip(1).filter(|l| !l.ends_with(',')).count();
    assert_eq!(with_arm, 16, "{schedule}");
    assert!(!lines(&out.join("records.ndjson")).is_empty());
}

#[test]
fn replay_reproduces_simulated_records() {
    let dir = simulated().path();
    let out = dir.join("replayed");
    let stdout = ok(nudge(&[
        "replay",
        "--log",
        s(&dir.join("sim/log.ndjson")),
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("interventions"), "{stdout}");
    assert_eq!(lines(&out.join("records.ndjson")), lines(&dir.join("sim/records.ndjson")));
}

#[test]
fn zero_cooldown_replay_intervenes_more() {
    let dir = simulated().path();
    let config = dir.join("eager.toml");
    std::fs::write(&config, "cooldown_ms = 0\n").unwrap();
    let out = dir.join("eager");
    ok(nudge(&[
        "replay",
        "--log",
        s(&dir.join("sim/log.ndjson")),
        "--config",
        s(&config),
        "--out",
        s(&out),
    ]));
    let eager = lines(&out.join("records.ndjson")).len();
    let base = lines(&dir.join("sim/records.ndjson")).len();
    assert!(eager > base, "{eager} vs {base}");
}

#[test]
fn train_writes_checkpoints_for_every_user() {
    let dir = simulated().path();
    let out = dir.join("models");
    ok(nudge(&["train", "--log", s(&dir.join("sim/log.ndjson")), "--out", s(&out)]));
    for u in 0..4 {
        for kind in ["personalized", "adaptive"] {
            let path = out.join(format!("u{u:02}.{kind}.json"));
            let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            assert!(model.is_object(), "{}", path.display());
        }
    }
    assert!(!lines(&out.join("updates.ndjson")).is_empty());
}

#[test]
fn report_prints_every_arm() {
    let dir = simulated().path();
    let out = dir.join("report");
    let stdout = ok(nudge(&[
        "report",
        "--log",
        s(&dir.join("sim/log.ndjson")),
        "--records",
        s(&dir.join("sim/records.ndjson")),
        "--out",
        s(&out),
    ]));
    for arm in ["control", "personalized", "adaptive_no_exp", "adaptive_exp"] {
        assert!(stdout.lines().any(|l| l.starts_with(arm)), "{arm} missing:\n{stdout}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = nudge(&["replay", "--log", s(&dir.path().join("missing.ndjson"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ndjson"));

    let garbage = dir.path().join("garbage.ndjson");
    std::fs::write(&garbage, "{not json}\n").unwrap();
    let out = nudge(&["report", "--log", s(&garbage)]);
    assert!(!out.status.success());

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "n_users = \"many\"\n").unwrap();
    let out = nudge(&["simulate", "--config", s(&config), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn serve_answers_health_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("serve.toml");
    std::fs::write(
        &config,
        r#"
[service]
bind = "127.0.0.1:0"
workers = 1

[warm_start]
n_users = 4
seed = 5

[warm_start.spans]
modeling_days = 3
break_days = 0
baseline_days = 1
intervention_days = 4
"#,
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_nudge"))
        .args(["serve", "--config", s(&config), "--out", s(dir.path())])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut addr = None;
    let mut line = String::new();
    while stderr.read_line(&mut line).unwrap() > 0 {
        if let Some(rest) = line.split("listening on ").nth(1) {
            addr = Some(rest.trim().to_string());
            break;
        }
        line.clear();
    }
    let addr = addr.expect("server reported its address");
    let mut stream = TcpStream::connect(&addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
}
