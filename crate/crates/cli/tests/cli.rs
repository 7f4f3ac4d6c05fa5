// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

use std::path::PathBuf;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcquic-sim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("mcquic-cli-{}-{name}", std::process::id()))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_and_verify_round_trip() {
    let trace = scratch("trace.jsonl");
    let report = scratch("report.json");
    let o = sim(&[
        "run",
        "key_rotation",
        "--trace",
        trace.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let out = stdout(&o);
    for check in [
        "budget",
        "ack_completeness",
        "anchoring",
        "conservation",
        "delivery",
    ] {
        assert!(out.contains(&format!("check {check}")), "{out}");
    }
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], true);

    let v = sim(&["verify", trace.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));

    // Claim an unanchored delivery: the first line that delivered bytes
    // becomes an unknown packet.
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut tampered = String::new();
    let mut done = false;
    for line in text.lines() {
        if !done && line.contains("\"ev\":\"rx\"") && !line.contains("\"dl\":0,") {
            tampered.push_str(&line.replace("\"v\":\"verified\"", "\"v\":\"unknown\""));
            done = true;
        } else {
            tampered.push_str(line);
        }
        tampered.push('\n');
    }
    assert!(done);
    std::fs::write(&trace, tampered).unwrap();
    let v = sim(&["verify", trace.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(
        stdout(&v).contains("check anchoring            FAIL"),
        "{}",
        stdout(&v)
    );

    std::fs::write(&trace, "not a trace\n").unwrap();
    assert_eq!(
        sim(&["verify", trace.to_str().unwrap()]).status.code(),
        Some(2)
    );
    std::fs::remove_file(&trace).ok();
    std::fs::remove_file(&report).ok();
}

#[test]
fn json_report_on_stdout() {
    let o = sim(&["run", "budget_steering", "--json", "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["seed"], 11);
    assert_eq!(r["clients"].as_array().unwrap().len(), 5);
}

#[test]
fn configuration_errors_exit_2() {
    assert_eq!(sim(&["run", "no_such_scenario"]).status.code(), Some(2));
    let bad = scratch("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nduration_ms = \"soon\"\n").unwrap();
    assert_eq!(sim(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::remove_file(&bad).ok();
    assert_eq!(sim(&["run"]).status.code(), Some(2));
    assert_eq!(sim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sim(&["scenarios", "show", "nope"]).status.code(), Some(2));
    assert_eq!(sim(&["--help"]).status.code(), Some(0));
}

#[test]
fn scenario_file_runs() {
    let shown = sim(&["scenarios", "show", "key_rotation"]);
    assert_eq!(shown.status.code(), Some(0));
    let path = scratch("copy.toml");
    std::fs::write(&path, &shown.stdout).unwrap();
    let a = sim(&["run", path.to_str().unwrap()]);
    let b = sim(&["run", "key_rotation"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    std::fs::remove_file(&path).ok();
}

#[test]
fn lists_bundled_scenarios() {
    let o = sim(&["scenarios", "list"]);
    let out = stdout(&o);
    for name in [
        "stream_100_clients",
        "no_multicast_network",
        "attacker_flood",
        "lossy_10_clients",
        "budget_steering",
        "key_rotation",
        "mixed_fallback",
    ] {
        assert!(out.lines().any(|l| l == name), "{out}");
    }
}
