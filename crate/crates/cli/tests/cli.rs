use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn evisurro(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evisurro"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evisurro(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap() + &String::from_utf8_lossy(&out.stderr)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn simulate(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "simulate", "--out", out, "--grid", "12x12", "--train", "16", "--cal", "9", "--test", "6", "--seed", "4",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn train(dir: &Path, data: &str, out: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--epochs",
        "4",
        "--hidden",
        "8",
        "--batch-size",
        "8",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    assert!(d.join("ds/manifest.txt").exists());
    train(d, "ds", "m.ckpt", &[]);
    assert!(d.join("m.ckpt").exists());
    assert!(d.join("m.ckpt.manifest").exists());
    assert_eq!(
        fs::read_to_string(d.join("m.ckpt.log.jsonl")).unwrap().lines().count(),
        4
    );

    let cal = ok(
        d,
        &[
            "calibrate",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "ds",
            "--out",
            "t.bin",
            "--levels",
            "0.05,0.2",
        ],
    );
    // n = 9: confidence above 1 - 2/10 cannot be certified.
    assert!(cal.contains("warning: level 0.05"), "{cal}");
    assert!(!cal.contains("warning: level 0.2 "), "{cal}");

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "m.ckpt",
            "--table",
            "t.bin",
            "--data",
            "ds",
            "--out",
            "rep",
            "--levels",
            "0.2,0.3",
        ],
    );
    let jsonl = fs::read_to_string(d.join("rep/coverage.jsonl")).unwrap();
    assert!(jsonl.lines().any(|l| l.contains("\"kind\":\"calibrated\"")));
    assert!(jsonl.lines().any(|l| l.contains("\"kind\":\"uncalibrated\"")));
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "level",
            "coverage",
            "mean_width",
            "median_width",
            "flagged_elements",
            "aggregation",
        ] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }
    for f in ["coverage.txt", "coverage_maps.json", "metrics.json", "config.toml"] {
        assert!(d.join("rep").join(f).exists(), "{f}");
    }

    let out = ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "m.ckpt",
            "--table",
            "t.bin",
            "--params",
            "0.1,0.5,0.9",
            "--level",
            "0.8",
            "--calibrated",
        ],
    );
    let json_line = out.lines().find(|l| l.starts_with('{')).unwrap();
    let v: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(v["mean"].as_array().unwrap().len(), 144);
    assert_eq!(v["interval"]["calibrated"], serde_json::json!(true));
}

#[test]
fn evaluate_without_table_reports_only_uncalibrated_curves() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    train(d, "ds", "m.ckpt", &[]);
    ok(
        d,
        &["evaluate", "--checkpoint", "m.ckpt", "--data", "ds", "--out", "rep"],
    );
    let jsonl = fs::read_to_string(d.join("rep/coverage.jsonl")).unwrap();
    assert!(!jsonl.contains("\"calibrated\""));
    // Default level grid 0.01..=0.30, three aggregations each.
    assert_eq!(jsonl.lines().count(), 30 * 3);
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "a", &[]);
    simulate(d, "b", &[]);
    assert_eq!(read_dir_sorted(&d.join("a")), read_dir_sorted(&d.join("b")));
    simulate(d, "a", &["--force"]);
    assert_eq!(read_dir_sorted(&d.join("a")), read_dir_sorted(&d.join("b")));
}

#[test]
fn training_and_calibration_are_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    train(d, "ds", "a.ckpt", &[]);
    train(d, "ds", "b.ckpt", &[]);
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    for t in ["a.bin", "b.bin"] {
        ok(d, &["calibrate", "--checkpoint", "a.ckpt", "--data", "ds", "--out", t]);
    }
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    let out = evisurro(d, &["simulate", "--out", "ds", "--grid", "12x12", "--train", "4"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));

    fs::write(d.join("ds/notes.txt"), "keep me").unwrap();
    let out = evisurro(
        d,
        &["simulate", "--out", "ds", "--grid", "12x12", "--train", "4", "--force"],
    );
    assert_eq!(code(&out), 2);
    assert!(d.join("ds/notes.txt").exists());
}

#[test]
fn missing_test_split_is_a_clear_data_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "simulate", "--out", "ds", "--grid", "12x12", "--train", "8", "--cal", "4", "--test", "0",
        ],
    );
    train(d, "ds", "m.ckpt", &[]);
    let out = evisurro(
        d,
        &["evaluate", "--checkpoint", "m.ckpt", "--data", "ds", "--out", "rep"],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no test split"));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // data: nonexistent dataset
    let out = evisurro(d, &["train", "--data", "missing", "--out", "m.ckpt"]);
    assert_eq!(code(&out), 3);
    // config: missing required key
    let out = evisurro(d, &["train", "--out", "m.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));

    simulate(d, "ds", &[]);
    // numeric: an absurd step size overflows the weights after the first update
    let out = evisurro(
        d,
        &[
            "train", "--data", "ds", "--out", "bad.ckpt", "--epochs", "3", "--hidden", "8", "--lr", "1e300",
        ],
    );
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("non-finite loss at epoch") && err.contains("batch"),
        "{err}"
    );
    assert!(!d.join("bad.ckpt").exists());

    train(d, "ds", "m.ckpt", &[]);
    let out = evisurro(d, &["predict", "--checkpoint", "m.ckpt", "--params", "0.1,2.0,0.3"]);
    assert_eq!(code(&out), 2);
    let out = evisurro(
        d,
        &[
            "predict",
            "--checkpoint",
            "m.ckpt",
            "--params",
            "0.1,0.2,0.3",
            "--level",
            "0.9",
            "--calibrated",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    fs::write(
        d.join("run.toml"),
        "[train]\ndata = \"ds\"\nout = \"m.ckpt\"\nepochs = 5\nhidden = [8]\nbatch_size = 8\nlambda = 0.0\nxi = 0.0\n",
    )
    .unwrap();
    let log = ok(d, &["--config", "run.toml", "train", "--epochs", "2"]);
    assert!(log.contains("epochs = 2"), "{log}");
    assert!(log.contains("lambda = 0.0"), "{log}");
    assert_eq!(
        fs::read_to_string(d.join("m.ckpt.log.jsonl")).unwrap().lines().count(),
        2
    );

    fs::write(d.join("bad.toml"), "[train]\nepoch = 5\n").unwrap();
    let out = evisurro(d, &["--config", "bad.toml", "train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn resumed_training_continues_the_loss_history() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "ds", &[]);
    train(d, "ds", "a.ckpt", &[]);
    ok(
        d,
        &[
            "train",
            "--data",
            "ds",
            "--out",
            "b.ckpt",
            "--hidden",
            "8",
            "--batch-size",
            "8",
            "--resume",
            "a.ckpt",
            "--epochs",
            "3",
        ],
    );
    let manifest = fs::read_to_string(d.join("b.ckpt.manifest")).unwrap();
    assert!(manifest.contains("epochs_trained = 7"), "{manifest}");
    let epochs: Vec<u64> = fs::read_to_string(d.join("b.ckpt.log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(epochs, (1..=7).collect::<Vec<_>>());
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&PathBuf::from("."), &["--help"]);
    for cmd in ["simulate", "train", "calibrate", "evaluate", "predict", "serve"] {
        assert!(out.contains(cmd), "{cmd}");
    }
}
