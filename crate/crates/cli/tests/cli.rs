use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).current_dir(root()).output().unwrap()
}

/// JSON lines on stdout.
fn events(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(forge(&[]).status.code(), Some(1));
    assert_eq!(forge(&["eval", "--task", "nope"]).status.code(), Some(1));
    assert_eq!(forge(&["--help"]).status.code(), Some(0));
}

#[test]
fn shapes_defaults() {
    let o = forge(&["shapes"]);
    assert!(o.status.success());
    let v = &events(&o)[0];
    assert_eq!(v["encoder_grid"]["tokens"], 5329);
    assert_eq!(v["connector_grid"]["tokens"], 1369);
}

#[test]
fn stats_of_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = forge(&["stats", "--in", path(tmp.path())]);
    assert!(o.status.success());
    let v = &events(&o)[0];
    assert_eq!(v["samples"], 0);
    assert_eq!(v["mean_boxes_per_sample"], 0.0);
}

#[test]
fn rec_eval_on_fixture() {
    let o = forge(&["eval", "--task", "rec", "--preds", "fixtures/rec-200/half-iou.jsonl", "--gt", "fixtures/rec-200/gt.jsonl"]);
    assert!(o.status.success());
    assert_eq!(events(&o)[0]["rec"]["overall"]["correct"], 0);
    let o = forge(&["eval", "--task", "rec", "--iou-geq", "--preds", "fixtures/rec-200/half-iou.jsonl", "--gt", "fixtures/rec-200/gt.jsonl"]);
    assert_eq!(events(&o)[0]["rec"]["overall"]["accuracy"], 1.0);
}

#[test]
fn plan_check_flags_illegal_plans() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("plan.json");
    assert!(forge(&["plan", "--scale", "13B", "--out", path(&good)]).status.success());
    assert_eq!(forge(&["plan", "--check", path(&good)]).status.code(), Some(0));
    let o = forge(&["plan", "--check", "fixtures/plans/pre-adapt-trains-tokenizer.json"]);
    assert_eq!(o.status.code(), Some(3));
    let ev = events(&o);
    assert_eq!(ev.last().unwrap()["event"], "error");
    assert_eq!(ev.last().unwrap()["code"], 3);
}

fn tiny_copy(dir: &Path, templates: &str) -> PathBuf {
    let mut cfg: Value = serde_json::from_slice(&std::fs::read(root().join("fixtures/tiny/pipeline.json")).unwrap()).unwrap();
    let data = root().join("fixtures/tiny");
    for s in cfg["sources"].as_array_mut().unwrap() {
        s["path"] = data.join(s["path"].as_str().unwrap()).to_str().unwrap().into();
    }
    cfg["mix"] = data.join("instruct.mix").to_str().unwrap().into();
    cfg["templates"] = templates.into();
    let p = dir.join("pipeline.json");
    std::fs::write(&p, serde_json::to_vec(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn pipeline_missing_templates_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_copy(tmp.path(), "missing.json");
    let o = forge(&["pipeline", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(events(&o).last().unwrap()["code"], 1);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn pipeline_single_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let templates = root().join("configs/templates.json");
    let cfg = tiny_copy(tmp.path(), path(&templates));
    let o = forge(&["pipeline", "--config", path(&cfg), "--stage", "curate"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = forge(&["pipeline", "--config", path(&cfg), "--stage", "ingest", "--stage", "curate"]);
    assert!(o.status.success());
    let ev = events(&o);
    let stages: Vec<_> = ev.iter().filter_map(|e| e["detail"]["stage"].as_str()).collect();
    assert_eq!(stages, ["ingest", "curate"]);
    assert!(tmp.path().join("out/curate").is_dir());
    assert!(!tmp.path().join("out/render").exists());

    let o = forge(&["stats", "--in", path(&tmp.path().join("out/curate"))]);
    assert!(events(&o)[0]["samples"].as_u64().unwrap() > 0);
}
