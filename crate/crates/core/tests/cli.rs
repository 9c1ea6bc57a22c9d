mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::criteria::tiny_run_config;

fn metapatch(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metapatch"));
    cmd.args(args).env_remove("METAPATCH_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("METAPATCH_OUTPUT_ROOT", r);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn standard_config(dir: &Path) -> serde_json::Value {
    let mut c = tiny_run_config(dir);
    c["train"] = serde_json::json!({"method": "standard", "epochs": 1, "batch_size": 8, "learning_rate": 0.05});
    c
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_run_config(tmp.path()));
    let out = tmp.path().join("dry");
    let o = metapatch(&["train", &cfg, "--dry-run", "--output", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_rejected_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny_run_config(tmp.path());
    c["train"]["learning_rat"] = serde_json::json!(0.1);
    let cfg = write_config(tmp.path(), "c.json", &c);
    let o = metapatch(&["train", &cfg, "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_rejected_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny_run_config(tmp.path());
    c["train"]["sigma"] = serde_json::json!(1.5);
    let cfg = write_config(tmp.path(), "c.json", &c);
    let o = metapatch(&["train", &cfg, "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(metapatch(&["bogus"], None).status.code(), Some(2));
    assert_eq!(metapatch(&["train"], None).status.code(), Some(2));
    assert_eq!(metapatch(&["train", "/nonexistent/config.json"], None).status.code(), Some(2));
    assert_eq!(metapatch(&["--help"], None).status.code(), Some(0));
}

#[test]
fn standard_training_writes_no_meta_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &standard_config(tmp.path()));
    let out = tmp.path().join("std");
    let o = metapatch(&["train", &cfg, "--output", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("checkpoint.bin").is_file());
    assert!(out.join("history.jsonl").is_file());
    assert!(!out.join("meta.bin").exists());
}

#[test]
fn mat_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_run_config(tmp.path()));
    let train_dir = tmp.path().join("mat");
    let o = metapatch(&["train", &cfg, "--output", train_dir.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["checkpoint.bin", "meta.bin", "history.jsonl", "config.json", "transfer.json"] {
        assert!(train_dir.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(train_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let hash = serde_json::from_str::<serde_json::Value>(history.lines().next().unwrap()).unwrap()["config_hash"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(hash.len(), 16);

    let ckpt = train_dir.join("checkpoint.bin");
    let atk = tmp.path().join("atk");
    let o = metapatch(
        &["attack", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--output", atk.to_str().unwrap(), "--export-ppm"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = std::fs::read_dir(atk.join("results")).unwrap().count();
    assert_eq!(results, 3);
    let csv = std::fs::read_to_string(atk.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("config_id,init,steps,step_size,momentum,cutoff,accuracy,loss_final"));
    assert!(atk.join("patch_00-RI.ppm").is_file());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(atk.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"].as_str().unwrap(), hash);
    // two epochs of transfer: two pool-seeded runs
    assert_eq!(report["transfer"].as_array().unwrap().len(), 2);

    let only_lf = tmp.path().join("lf");
    let o = metapatch(
        &["attack", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--family", "LF", "--output", only_lf.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(only_lf.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["family"], "LF");
    assert!(report["transfer"].as_array().unwrap().is_empty());

    let cmp = tmp.path().join("cmp");
    let o = metapatch(
        &["report", atk.to_str().unwrap(), only_lf.to_str().unwrap(), "--output", cmp.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("method,clean,RI,DI,LF,Tr,Min"));
}

#[test]
fn single_config_grid_writes_one_result() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = standard_config(tmp.path());
    c["attack"] = serde_json::json!({"grid": [{"init": "random", "steps": 2, "step_size": 0.05, "batch_size": 4}]});
    let cfg = write_config(tmp.path(), "c.json", &c);
    let train_dir = tmp.path().join("m");
    assert_eq!(metapatch(&["train", &cfg, "--output", train_dir.to_str().unwrap()], None).status.code(), Some(0));
    let atk = tmp.path().join("a");
    let ckpt = train_dir.join("checkpoint.bin");
    let o = metapatch(&["attack", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--output", atk.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(atk.join("results")).unwrap().count(), 1);
    assert!(atk.join("report.json").is_file());
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_run_config(tmp.path()));
    let o = metapatch(&["attack", &cfg, "--checkpoint", "/nonexistent/checkpoint.bin"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn report_rejects_malformed_and_mismatched_files() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("report.json"), "{ not json").unwrap();
    let o = metapatch(&["report", bad.to_str().unwrap(), "--output", tmp.path().join("c").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad"), "{}", stderr(&o));

    let old = tmp.path().join("old");
    std::fs::create_dir(&old).unwrap();
    std::fs::write(old.join("report.json"), r#"{"schema_version": 0}"#).unwrap();
    let o = metapatch(&["report", old.to_str().unwrap(), "--output", tmp.path().join("c").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
}

#[test]
fn output_root_applies_to_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let o = metapatch(
        &["synth-data", "--output", "shapes", "--per-class", "3", "--classes", "2", "--resolution", "8"],
        Some(tmp.path()),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = metapatch::data::load_folder(&tmp.path().join("shapes"), 8).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.class_names(), ["disk", "square"]);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let p = path.to_str().unwrap();
        let o = metapatch(&["train", p, "--dry-run"], None);
        assert_eq!(o.status.code(), Some(0), "{p}: {}", stderr(&o));
        seen += 1;
    }
    assert!(seen >= 4);
}
