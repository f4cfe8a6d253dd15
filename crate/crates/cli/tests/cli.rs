use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cra")).args(args).output().expect("spawn cra")
}

fn tiny(dir: &Path, classes: usize) -> Value {
    json!({
        "data": {
            "root": dir.join("data"),
            "scene": {"classes": classes, "height": 16, "width": 16, "shapes_per_image": 3,
                      "rare_class": if classes > 2 { json!(classes - 1) } else { Value::Null }},
            "source_train": 6, "target_train": 6, "target_eval": 3
        },
        "model": {"feature_widths": [4, 6], "disc_widths": [5]},
        "source": {"iterations": 4, "batch": 2},
        "cda": {"iterations": 2, "batch": 2},
        "cra": {"iterations": 2, "batch": 2},
        "crop": 8,
        "log_interval": 2,
        "checkpoint_interval": 2,
        "eval_batch": 2,
        "output_dir": dir.join("run")
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Last stdout line, which carries the command result or the error.
fn last_event(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| panic!("no stdout; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(line).unwrap()
}

fn assert_exit(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ev = last_event(out);
    assert_eq!(ev["event"], "error");
    assert_eq!(ev["error"]["kind"], kind);
    assert_eq!(ev["error"]["exit_code"], code);
}

#[test]
fn grad_check_passes() {
    let out = cra(&["grad-check", "--seeds", "3"]);
    assert!(out.status.success());
    let ev = last_event(&out);
    assert_eq!(ev["event"], "grad-check");
    assert_eq!(ev["result"]["passed"], true);
    assert_eq!(ev["result"]["checks"].as_array().unwrap().len(), 8);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", &json!({"seeed": 1}));
    assert_exit(&cra(&["pipeline", "--config", bad.to_str().unwrap()]), 2, "Config");
    let missing = dir.path().join("absent.json");
    assert_exit(&cra(&["gen-data", "--config", missing.to_str().unwrap()]), 2, "Config");
}

#[test]
fn missing_prerequisites_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny(dir.path(), 3));
    let cfg = cfg.to_str().unwrap();
    assert_exit(&cra(&["train-source", "--config", cfg]), 3, "MissingPrerequisite");
    assert!(cra(&["gen-data", "--config", cfg]).status.success());
    assert_exit(&cra(&["train-cda", "--config", cfg]), 3, "MissingPrerequisite");
    assert_exit(&cra(&["eval", "--config", cfg, "--stage", "cra"]), 3, "MissingPrerequisite");
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), 3);
    c["optim"] = json!({"sgd_lr": 1e300});
    let cfg = write_config(dir.path(), "c.json", &c);
    assert_exit(&cra(&["pipeline", "--config", cfg.to_str().unwrap()]), 4, "Numerical");
}

#[test]
fn io_failures_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny(dir.path(), 3));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let root = blocker.join("data");
    let out = cra(&["gen-data", "--config", cfg.to_str().unwrap(), "--data-root", root.to_str().unwrap()]);
    assert_exit(&out, 5, "Io");
}

#[test]
fn stage_commands_chain_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny(dir.path(), 3));
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-data", "train-source", "train-cda", "split-regions", "train-cra"] {
        let out = cra(&[cmd, "--config", cfg]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    // Rerunning a finished stage is a no-op.
    let out = cra(&["train-cra", "--config", cfg]);
    assert!(out.status.success());
    let source = dir.path().join("run/reports/source.json");
    let out = cra(&["eval", "--config", cfg, "--stage", "cra", "--against", source.to_str().unwrap()]);
    assert!(out.status.success());
    let ev = last_event(&out);
    assert_eq!(ev["event"], "report");
    assert_eq!(ev["result"]["stage"], "cra");
    let table = String::from_utf8_lossy(&out.stderr);
    assert!(table.contains("Source only") && table.contains("CDA+CRA"), "{table}");

    let out = cra(&["compare-baselines", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = last_event(&out)["result"]["rows"].as_array().unwrap().len();
    assert_eq!(rows, 4);

    let out = cra(&["pipeline", "--config", cfg]);
    assert!(out.status.success());
    let ev = last_event(&out);
    assert_eq!(ev["event"], "pipeline");
    assert_eq!(ev["result"]["stages"].as_array().unwrap().len(), 4);
}

#[test]
fn changed_config_needs_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), 3);
    let cfg = write_config(dir.path(), "c.json", &c);
    assert!(cra(&["pipeline", "--config", cfg.to_str().unwrap()]).status.success());
    c["temperature"] = json!(1.5);
    let changed = write_config(dir.path(), "changed.json", &c);
    let changed = changed.to_str().unwrap();
    assert_exit(&cra(&["train-cra", "--config", changed]), 3, "MissingPrerequisite");
    assert!(cra(&["train-cra", "--config", changed, "--allow-hash-mismatch"]).status.success());
}

#[test]
fn split_uses_lambda_0_01_for_19_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path(), 19);
    c["data"]["scene"]["rare_class"] = Value::Null;
    let cfg = write_config(dir.path(), "c.json", &c);
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-data", "train-source", "train-cda"] {
        assert!(cra(&[cmd, "--config", cfg]).status.success(), "{cmd}");
    }
    let out = cra(&["split-regions", "--config", cfg]);
    assert!(out.status.success());
    let ev = last_event(&out);
    assert_eq!(ev["event"], "split");
    assert_eq!(ev["result"]["summary"]["lambda"], 0.01);
    assert_eq!(ev["result"]["summary"]["classes"], 19);
}
