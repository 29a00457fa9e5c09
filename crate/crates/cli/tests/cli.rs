use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vibrotwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibrotwin"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vibrotwin(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(vibrotwin(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(vibrotwin(&["run-experiment"]).status.code(), Some(2));
    assert_eq!(
        vibrotwin(&["run-experiment", "--protocol", "nope"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_with_one() {
    let out = vibrotwin(&["analyze", "--input", "/nonexistent/logs"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn ball_hold_drives_palm_motor() {
    let text = ok(&[
        "simulate",
        "--object",
        "ball",
        "--mode",
        "finger:6",
        "--threshold",
        "0.5",
        "--no-frames",
    ]);
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let report = lines.last().unwrap();
    assert_eq!(report["event"], "report");
    assert_eq!(report["frames"], 260);

    let palm_on = |v: &Value| {
        v["command"]["activations"]
            .as_array()
            .unwrap()
            .iter()
            .any(|a| a["motor"] == 5)
    };
    let applied: Vec<&Value> = lines.iter().filter(|v| v["event"] == "applied").collect();
    // Mid-hold the palm motor is on; after release everything is off.
    let at = |t: u64| {
        applied
            .iter()
            .rev()
            .find(|v| v["t_ms"].as_u64().unwrap() <= t)
            .unwrap()
    };
    assert!(palm_on(at(1000)));
    assert!(!palm_on(at(2600)));
}

#[test]
fn experiments_then_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("logs");
    for protocol in [
        "intensity",
        "single-location",
        "pair-location",
        "object-task",
    ] {
        let out = ok(&[
            "run-experiment",
            "--protocol",
            protocol,
            "--seed",
            "4",
            "--out",
            &s(&logs),
        ]);
        if protocol != "object-task" {
            assert!(out.contains("accuracy 1.000"), "{out}");
        }
    }
    let summary = ok(&["analyze", "--input", &s(&logs)]);
    let v: Value = serde_json::from_str(&summary).unwrap();
    // Three discrimination sessions plus one session per compression mode.
    assert_eq!(v["sessions"].as_array().unwrap().len(), 9);
    assert!(v["object"]["modes"].as_array().unwrap().len() == 6);

    let report = tmp.path().join("report");
    ok(&["analyze", "--input", &s(&logs), "--report", &s(&report)]);
    for file in [
        "summary.json",
        "sessions.csv",
        "site_scores.csv",
        "object_modes.csv",
    ] {
        assert!(report.join(file).is_file(), "{file}");
    }
    // Re-running into the same log dir with the same ids is refused.
    let again = vibrotwin(&[
        "run-experiment",
        "--protocol",
        "intensity",
        "--seed",
        "4",
        "--out",
        &s(&logs),
    ]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn modes_are_listed_and_shown() {
    let list = ok(&["modes", "list"]);
    assert_eq!(list.lines().count(), 6);
    assert!(list.contains("finger:6\tM0=3 M1=3 M2=3 M3=3 M4=3 M5=10"));
    let show = ok(&["modes", "show", "palm:3"]);
    assert!(!show.is_empty());
    assert_eq!(
        vibrotwin(&["modes", "show", "palm:4"]).status.code(),
        Some(1)
    );
}
