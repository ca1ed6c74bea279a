use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rubble(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rubble")).args(args).env_remove("RUBBLE_SEED").output().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

#[test]
fn help_exits_zero() {
    let out = rubble(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen-data", "train", "eval", "tune", "infer", "simulate", "serve", "calibrate"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(rubble(&[]).status.code(), Some(2));
    assert_eq!(rubble(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rubble(&["calibrate"]).status.code(), Some(2));
    assert_eq!(rubble(&["--seed", "abc", "calibrate", "x.csv"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let out = rubble(&["calibrate", "/nonexistent/table.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error:"));
    assert_eq!(rubble(&["simulate", "/nonexistent/map.json"]).status.code(), Some(1));
}

#[test]
fn calibrate_prints_collective_accuracy() {
    let out = rubble(&["calibrate", &fixture("calibration/temperature.csv"), &fixture("calibration/humidity.csv"), &fixture("calibration/pressure.csv")]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("97.456%"));
    assert!(text.contains("DISCREPANCY temperature average_pct_error"));
    let out = rubble(&["--json", "calibrate", &fixture("calibration/pressure.csv")]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sensors"][0]["sensor"], "pressure");
}

#[test]
fn eval_tables_report_f1() {
    let out = rubble(&["eval", "--tables", &fixture("confusion/validation.csv"), &fixture("confusion/test.csv")]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Accuracy: 83.6%"));
    assert!(text.contains("Accuracy: 89.8%"));
}

#[test]
fn simulate_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let map = fixture("maps/demo.json");
    let cmds = fixture("maps/demo_commands.jsonl");
    let run = |name: &str, seed: &str| {
        let log = dir.path().join(name);
        let out = rubble(&["--seed", seed, "simulate", &map, "--ticks", "12", "--commands", &cmds, "--log", log.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(log).unwrap()
    };
    let a = run("a.ndjson", "3");
    assert_eq!(a, run("b.ndjson", "3"));
    assert_ne!(a, run("c.ndjson", "4"));

    let replayed = dir.path().join("r.ndjson");
    let out = rubble(&[
        "--seed", "3", "simulate", &map, "--ticks", "12", "--replay",
        dir.path().join("a.ndjson").to_str().unwrap(), "--log", replayed.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(a, std::fs::read(replayed).unwrap());
}

#[test]
fn seed_comes_from_environment() {
    let map = fixture("maps/demo.json");
    let with_env = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_rubble"))
            .args(["simulate", &map, "--ticks", "2"])
            .env("RUBBLE_SEED", seed)
            .output()
            .unwrap()
            .stdout
    };
    let flagged = rubble(&["--seed", "9", "simulate", &map, "--ticks", "2"]).stdout;
    assert_eq!(with_env("9"), flagged);
    assert_ne!(with_env("10"), flagged);
}

#[test]
fn generate_train_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("m.rsnn");
    let ok = |args: &[&str]| {
        let out = rubble(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["gen-data", "--out", data.to_str().unwrap(), "--per-class", "12"]);
    ok(&["train", "--data", data.to_str().unwrap(), "--out", model.to_str().unwrap(), "--epochs", "3"]);
    let wav = std::fs::read_dir(data.join("test/hello_help")).unwrap().next().unwrap().unwrap().path();
    let text = ok(&["infer", wav.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(text.starts_with("Predictions (DSP: "));
    assert!(text.contains("hello,help:\n"));
    let text = ok(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(text.contains("Accuracy: "));
}
