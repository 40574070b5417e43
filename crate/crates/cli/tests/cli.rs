use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eaconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eaconv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eaconv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has the error document");
    let v: Value = serde_json::from_str(line).expect("error is JSON");
    assert!(v["error"]["kind"].is_string());
    assert!(v["error"]["message"].is_string());
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"image_size": 16, "samples_per_class": 0, "seed": 0}"#).unwrap();
    ok(&[
        "gen-data",
        "--spec",
        p(&spec),
        "--train-per-class",
        "6",
        "--test-per-class",
        "3",
        "--seed",
        "4",
        "--out",
        p(dir),
    ]);
}

#[test]
fn end_to_end_train_transfer_perturb_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let (train, test) = (d.join("train.eads"), d.join("test.eads"));
    assert!(train.exists() && d.join("test.eads.json").exists());

    let job = d.join("job.json");
    fs::write(
        &job,
        serde_json::json!({
            "data": train,
            "eval": test,
            "widths": [4, 4, 4, 4],
            "train": {"epochs": 2, "batch_size": 8}
        })
        .to_string(),
    )
    .unwrap();
    let std_ckpt = d.join("std.eacp");
    let last: Value = serde_json::from_str(&ok(&["train", "--config", p(&job), "--out", p(&std_ckpt)])).unwrap();
    assert_eq!(last["epoch"], 1);
    assert!(d.join("std.eacp.history.json").exists());

    let ea_ckpt = d.join("ea.eacp");
    let report: Value = serde_json::from_str(&ok(&["transfer", "--from", p(&std_ckpt), "--to", p(&ea_ckpt)])).unwrap();
    assert_eq!(report["projected_layers"], serde_json::json!([0]));

    let acc = |model: &Path| -> f64 {
        let v: Value = serde_json::from_str(&ok(&["evaluate", "--model", p(model), "--data", p(&test)])).unwrap();
        v["accuracy"].as_f64().unwrap()
    };
    assert_eq!(acc(&std_ckpt), acc(&ea_ckpt));

    let spec = d.join("rot.json");
    fs::write(&spec, r#"{"kind": "rotation", "params": {"theta": 15}, "seed": 2}"#).unwrap();
    let rotated = d.join("rot.eads");
    ok(&["perturb", "--spec", p(&spec), "--data", p(&test), "--out", p(&rotated)]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("rot.eads.json")).unwrap()).unwrap();
    assert_eq!(manifest["meta"]["perturbation"]["kind"], "rotation");

    let schedules = d.join("schedules.json");
    fs::write(
        &schedules,
        r#"[{"kind": "gaussian", "severities": [1, 3]}, {"kind": "zoom", "severities": [1.2]}]"#,
    )
    .unwrap();
    let csv = d.join("sweep.csv");
    let std_arg = format!("standard={}", p(&std_ckpt));
    let ea_arg = format!("eaconv={}", p(&ea_ckpt));
    ok(&[
        "sweep", "--model", &std_arg, "--model", &ea_arg, "--data", p(&test), "--schedules",
        p(&schedules), "--report", p(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * (1 + 3));
    assert!(d.join("sweep.json").exists());
}

#[test]
fn compare_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let cfg = d.join("compare.json");
    fs::write(
        &cfg,
        r#"{"widths": [4, 4, 4, 4], "train": {"epochs": 1}, "finetune": {"epochs": 1},
            "schedules": [{"kind": "elastic", "severities": [1, 2]}]}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let report = d.join(name);
        let out_dir = d.join(format!("{name}.models"));
        let summary = ok(&[
            "compare",
            "--config",
            p(&cfg),
            "--train",
            p(&d.join("train.eads")),
            "--test",
            p(&d.join("test.eads")),
            "--report",
            p(&report),
            "--out-dir",
            p(&out_dir),
        ]);
        assert!(summary.starts_with("model,clean,"));
        assert!(out_dir.join("eaconv.eacp").exists());
        fs::read(&report).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert_eq!(a, b);
    assert!(d.join("a.csv.summary.csv").exists());
}

#[test]
fn basis_generation_and_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("basis.json");
    let info: Value = serde_json::from_str(&ok(&["gen-basis", "--kernel-size", "5", "--out", p(&cfg)])).unwrap();
    assert_eq!(info["paths"], 5);
    assert_eq!(info["num_basis"], 25);
    assert_eq!(info["complete"], true);
    let out = dir.path().join("pgm");
    ok(&["render-basis", "--basis", p(&cfg), "--out", p(&out), "--scale", "2"]);
    let pgm = fs::read(out.join("path1_basis03.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 125);
}

#[test]
fn gradcheck_subset_passes() {
    let out = ok(&["gradcheck", "--instances", "3", "--only", "relu,eaconv"]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(v.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn failures_exit_nonzero_with_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = eaconv(&["evaluate", "--model", p(&d.join("nope.eacp")), "--data", p(&d.join("nope.eads"))]);
    error_json(&missing);

    let bad_ckpt = d.join("bad.eacp");
    fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    fs::write(d.join("bad.eacp.json"), "{}").unwrap();
    small_data(d);
    let v = error_json(&eaconv(&["evaluate", "--model", p(&bad_ckpt), "--data", p(&d.join("test.eads"))]));
    assert!(v["error"]["message"].as_str().unwrap().len() > 5);

    let spec = d.join("bad_spec.json");
    fs::write(&spec, r#"{"kind": "zoom", "params": {"factor": 0.5}, "seed": 0}"#).unwrap();
    let v = error_json(&eaconv(&[
        "perturb", "--spec", p(&spec), "--data", p(&d.join("test.eads")), "--out", p(&d.join("x.eads")),
    ]));
    assert_eq!(v["error"]["kind"], "config");

    let truncated = d.join("batch.bin");
    fs::write(&truncated, vec![0u8; 3073 + 100]).unwrap();
    let clean = d.join("clean.json");
    fs::write(&clean, r#"{"kind": "clean", "seed": 0}"#).unwrap();
    let v = error_json(&eaconv(&[
        "perturb", "--spec", p(&clean), "--data", p(&truncated), "--out", p(&d.join("y.eads")),
    ]));
    assert!(v["error"]["message"].as_str().unwrap().contains("3073"));

    let v = error_json(&eaconv(&["sweep", "--model", "nameonly", "--data", p(&d.join("test.eads")), "--report", p(&d.join("r.csv"))]));
    assert!(v["error"]["message"].as_str().unwrap().contains("name=path"));

    // argument errors come from the parser and still exit non-zero
    assert!(!eaconv(&["train"]).status.success());
}
