//! Runs the `envshift` binary against small configs in a temporary directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SYNTH: &str = r#"{
  "name": "synth_toy",
  "data": {
    "synthetic": {
      "n_regions": 3,
      "n_months": 4,
      "amplitude": [20.0, 25.0, 30.0],
      "slope": [0.02, 0.0, -0.01],
      "noise_scale": 0.1,
      "seed": 5
    }
  },
  "scenario": { "test_month": "2020-04", "train_months": 3, "train_stride": 7 },
  "train": { "hidden": 4, "max_epochs": 2, "batch_size": 32,
             "classifier": { "hidden": 4, "epochs": 1 } },
  "seeds": [1]
}"#;

fn envshift(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_envshift"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {}: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn trips_config(dir: &Path) -> PathBuf {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    for f in ["trips_sample.csv", "toy_trips.json"] {
        fs::copy(data.join(f), dir.join(f)).unwrap();
    }
    dir.join("toy_trips.json")
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SYNTH);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&envshift(&["synth"], &config, &a));
    ok(&envshift(&["synth"], &config, &b));
    let read = |d: &Path| fs::read(d.join("cube/values.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SYNTH);
    let out = tmp.path().join("out");
    ok(&envshift(&["train"], &config, &out));
    assert!(out.join("train/checkpoint/manifest.json").exists());
    assert!(out.join("train/train_log.csv").exists());
    ok(&envshift(&["evaluate"], &config, &out));
    let results = fs::read_to_string(out.join("evaluate/results.csv")).unwrap();
    let header = results.lines().next().unwrap();
    assert_eq!(
        header,
        "scenario,train_months,model,variant,seed,mae,rmse,runtime_s"
    );
    assert!(results
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("synth_toy,3,gru_graph,full,1,"));
}

#[test]
fn evaluate_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SYNTH);
    let o = envshift(&["evaluate"], &config, &tmp.path().join("out"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run train first"));
}

#[test]
fn sweep_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let config = trips_config(tmp.path());
    let out = tmp.path().join("out");
    ok(&envshift(&["sweep"], &config, &out));
    let results = fs::read_to_string(out.join("sweep/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 10);
    let best = fs::read_to_string(out.join("sweep/best.json")).unwrap();
    assert!(best.contains("alpha"));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let config = trips_config(tmp.path());
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_envshift"))
        .args(["ablate", "--seed", "3", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    ok(&o);
    let results = fs::read_to_string(out.join("ablate/results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",full,3,") && rows[1].contains(",original,3,"));
    assert!(out
        .join("ablate/seed_3/full/checkpoint/manifest.json")
        .exists());
}

#[test]
fn malformed_config_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "{\n  \"name\": \"x\",\n  \"seeds\": [1,,2]\n}");
    let o = envshift(&["train"], &config, &tmp.path().join("out"));
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_envshift"))
        .arg("train")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
