//! The `racestack` binary end to end: run a scenario, then rebuild its report from the log.

use std::process::Command;

fn racestack() -> Command {
    Command::new(env!("CARGO_BIN_EXE_racestack"))
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = racestack()
        .args(["run", "--scenario", "lane_change", "--seed", "9", "--duration", "6", "--headless", "--log-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = dir.path().join("lane_change_9.jsonl");
    let live = dir.path().join("lane_change_9_report");
    for f in ["cte_brackets.csv", "gg.csv", "detection_periods.csv", "passes.csv", "summary.json", "run.json"] {
        assert!(live.join(f).is_file(), "missing {f}");
    }

    let replay = dir.path().join("replayed");
    let out = racestack().arg("report").arg(&log).arg("--out").arg(&replay).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["cte_brackets.csv", "gg.csv", "detection_periods.csv", "passes.csv", "summary.json"] {
        let a = std::fs::read(live.join(f)).unwrap();
        let b = std::fs::read(replay.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between run and report");
    }
}

#[test]
fn list_names_every_bundled_scenario() {
    let out = racestack().arg("list").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for (name, _) in racestack::scenario::BUNDLED {
        assert!(text.lines().any(|l| l == *name), "{name} missing");
    }
}

#[test]
fn bad_scenario_fails_cleanly() {
    let out = racestack().args(["run", "--scenario", "no_such_track", "--headless"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
}
