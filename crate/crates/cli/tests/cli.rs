use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unlearn-lens"));
    c.env_remove("UNLEARN_LENS_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

const SMALL: &str = r#"{
  "model": {"embed_dim": 8, "hidden": [16, 16]},
  "corpus": {"forget_sequences": 8, "retain_sequences": 8, "unrelated_sequences": 8, "holdout_sequences": 8},
  "seeds": [3],
  "base": {"steps": 30, "min_retain_accuracy": 0.0},
  "unlearn": {"steps_per_request": 4},
  "probe": {"size": 16}
}"#;

fn small_run(root: &Path) -> String {
    let cfg = root.join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = root.join("run");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    out.to_str().unwrap().to_string()
}

#[test]
fn self_comparison_of_dumps_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let a = tmp.path().join("a.ulns");
    let a = a.to_str().unwrap();
    assert_ok(&run(&["dump", "--run", &dir, "--phase", "unlearned", "--out", a]));
    let o = run(&["diagnose", "--orig", a, "--upd", a]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mean_pca_distance"].as_f64().unwrap(), 0.0);
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        assert!((l["pca_similarity"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{l}");
        assert!((l["cka"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{l}");
    }
}

#[test]
fn dumps_of_different_phases_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let a = tmp.path().join("a.ulns");
    let b = tmp.path().join("b.ulns");
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    assert_ok(&run(&["dump", "--run", &dir, "--out", a]));
    assert_ok(&run(&["dump", "--run", &dir, "--phase", "unlearned", "--out", b]));
    let o = run(&["diagnose", "--orig", a, "--upd", b]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["mean_pca_distance"].as_f64().unwrap() > 0.0);
    assert_eq!(v["orig_label"], "original");
}

#[test]
fn invalid_method_exits_1_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"unlearn": {"loss": {"method": "GA+XYZ"}}}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["code"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("unlearn.loss.method"), "{e}");
}

#[test]
fn underfit_base_model_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"base": {"steps": 1, "min_retain_accuracy": 1.0}}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "numerical");
}

#[test]
fn validation_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = run(&["classify", "--run", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let dump = tmp.path().join("t.ulns");
    fs::write(&dump, b"ULNS\x01\x00\x00\x00\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x02").unwrap();
    let d = dump.to_str().unwrap();
    let o = run(&["diagnose", "--orig", d, "--upd", d]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"]["code"], "truncated_payload");

    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bin()
        .env("UNLEARN_LENS_THREADS", "zero")
        .args(["classify", "--run", "x"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("UNLEARN_LENS_THREADS"));
}

#[test]
fn probe_reports_one_point_per_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let o = run(&["probe", "--run", &dir, "--budgets", "0,0.5", "--layer", "1"]);
    assert_ok(&o);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let pts = v["points"].as_array().unwrap();
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[0]["mean_pca_distance"].as_f64().unwrap(), 0.0);
    assert!(pts[1]["mean_pca_distance"].as_f64().unwrap() > 0.0);
}

#[test]
fn report_regenerates_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let plot = Path::new(&dir).join("plots/pca_similarity.csv");
    let before = fs::read(&plot).unwrap();
    fs::remove_file(&plot).unwrap();
    let o = run(&["report", "--run", &dir]);
    assert_ok(&o);
    assert_eq!(fs::read(&plot).unwrap(), before);
    assert!(stdout(&o).lines().last().unwrap().starts_with("regime="));
}

/// The staged command script at the reversible preset reproduces the
/// one-shot run and ends in the reversible, non-catastrophic regime.
#[test]
fn reversible_preset_command_script() {
    let tmp = tempfile::tempdir().unwrap();
    let staged = tmp.path().join("staged");
    let s = staged.to_str().unwrap();
    assert_ok(&run(&["train", "--preset", "reversible", "--out", s]));
    assert_ok(&run(&["unlearn", "--run", s]));
    assert_ok(&run(&["relearn", "--run", s]));
    assert_ok(&run(&["diagnose", "--run", s]));
    let o = run(&["classify", "--run", s]);
    assert_ok(&o);
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("regime=reversible_non_catastrophic "), "{last}");

    let full = tmp.path().join("full");
    let o = run(&["run", "--preset", "reversible", "--out", full.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().last().unwrap(), last);
    for f in ["metrics.csv", "diagnostics.json", "checkpoints/theta_r_forget.tlmc"] {
        assert!(fs::read(staged.join(f)).unwrap() == fs::read(full.join(f)).unwrap(), "{f} differs");
    }
}
