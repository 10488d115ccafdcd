//! Drives the `hift` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hift(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hift"))
        .args(args)
        .env("HIFT_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn config(mode: &str, m: usize, lr: f64) -> String {
    format!(
        r#"
        name = "{mode}"
        mode = "{mode}"
        m = {m}
        optimizer = "adamw"
        lr = {lr:?}
        batch_size = 8
        steps = 12

        [arch]
        vocab = 10
        seq_len = 3
        width = 6
        hidden = 2
        outputs = 2

        [task]
        kind = "synthetic-classification"
        train_size = 64
        eval_size = 16
        "#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_writes_outputs_and_compare_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for (mode, m) in [("hift", 1), ("fpft", 4)] {
        let out = dir.path().join(mode);
        let cfg = write(dir.path(), &format!("{mode}.toml"), &config(mode, m, 0.01));
        let o = hift(&["train", "--config", &cfg], &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["report.json", "steps.csv", "memory.csv"] {
            assert!(out.join(f).is_file(), "{mode}: missing {f}");
        }
        let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
        assert!(steps.starts_with("step,sweep,group,loss,lr,"));
        assert_eq!(steps.lines().count(), 13);
        reports.push(out.join("report.json").to_str().unwrap().to_string());
    }
    let curves = dir.path().join("curves.csv");
    let o = hift(
        &[
            "compare",
            &reports[0],
            &reports[1],
            "--curves",
            curves.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("final train loss"), "{text}");
    assert!(text.contains("device peak grad"), "{text}");
    let curves = fs::read_to_string(curves).unwrap();
    assert!(curves.starts_with("step,loss_a,loss_b"));
    assert_eq!(curves.lines().count(), 13);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", &config("hift", 9, 0.01));
    let o = hift(&["train", "--config", &bad], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));
    let missing = dir.path().join("nope.toml");
    let o = hift(&["train", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "hot.toml", &config("hift", 1, 1e200));
    let o = hift(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at step"));
}

#[test]
fn comparing_different_tasks_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let a_cfg = write(dir.path(), "a.toml", &config("hift", 1, 0.01));
    let b_cfg = write(
        dir.path(),
        "b.toml",
        &config("fpft", 4, 0.01).replace("train_size = 64", "train_size = 48"),
    );
    for (cfg, sub) in [(&a_cfg, "a"), (&b_cfg, "b")] {
        let o = hift(&["train", "--config", cfg], &dir.path().join(sub));
        assert!(o.status.success());
    }
    let a = dir.path().join("a/report.json");
    let b = dir.path().join("b/report.json");
    let o = hift(&["compare", a.to_str().unwrap(), b.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimate_flat_reference_model() {
    let dir = tempfile::tempdir().unwrap();
    let arch = write(dir.path(), "flat.toml", "param_bytes = 26080000000\nunits = 34\n");
    let o = hift(&["estimate", "--arch", &arch, "--m", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["k"], 34);
    assert_eq!(v["fpft_gb"].as_f64().unwrap(), 104.32);
    assert!((v["hift_average_gb"].as_f64().unwrap() - 28.381).abs() < 1e-3);
    assert_eq!(v["notes"].as_array().unwrap().len(), 1);

    let o = hift(
        &["estimate", "--arch", &arch, "--m", "34", "--optimizer", "sgd"],
        dir.path(),
    );
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["k"], 1);
    assert_eq!(v["hift_average_gb"], v["fpft_gb"]);
}

#[test]
fn estimate_arch_reports_peak_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let arch = write(
        dir.path(),
        "arch.toml",
        "vocab = 32\nseq_len = 8\nwidth = 16\nhidden = 4\noutputs = 4\nunit = \"transformer\"\n",
    );
    let o = hift(
        &["estimate", "--arch", &arch, "--m", "6", "--precision", "mixed"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["trainable_peak_fraction"].as_f64().unwrap(), 1.0);
    assert_eq!(v["precision"], "mixed");
    assert!(v["master_gb"].as_f64().unwrap() > 0.0);

    let o = hift(&["estimate", "--arch", &arch, "--m", "7"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
