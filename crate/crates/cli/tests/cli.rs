use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossdepth::data::{DatasetManifest, Split};
use crossdepth::models::load_checkpoint;
use crossdepth::trainer::{read_log, LAST_CHECKPOINT};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdepth"))
        .args(args)
        .output()
        .expect("spawn crossdepth")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, train: usize, val: usize, size: &str) -> PathBuf {
    let out = dir.join("data");
    ok(&["synth-data", "--out", s(&out), "--train", &train.to_string(), "--val", &val.to_string(), "--size", size, "--seed", "3"]);
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, r#"{"epochs": 1, "batch_size": 2}"#).unwrap();
    p
}

/// Echo printed on stdout before any work starts.
fn echoed(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let end = text.find("\n}").expect("echo document") + 2;
    serde_json::from_str(&text[..end]).unwrap()
}

#[test]
fn synth_data_writes_requested_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth-data", "--out", s(out), "--train", "3", "--val", "2", "--test", "1", "--size", "24x32", "--seed", "5"]);
    }
    let m = DatasetManifest::load(&a).unwrap();
    assert_eq!(m.ids(Split::Train).len(), 3);
    assert_eq!(m.ids(Split::Val).len(), 2);
    assert_eq!(m.ids(Split::Test).len(), 1);
    for e in m.entries(&a) {
        for p in [e.image_path, e.depth_path] {
            let other = b.join(p.strip_prefix(&a).unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&other).unwrap(), "{}", p.display());
        }
    }
}

#[test]
fn synth_data_rejects_empty_splits_and_unwritable_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&["synth-data", "--out", s(&out), "--train", "0"]), 2);
    let file = dir.path().join("plain_file");
    std::fs::write(&file, "x").unwrap();
    let under_file = file.join("sub");
    assert_eq!(code(&["synth-data", "--out", s(&under_file), "--train", "1", "--val", "1", "--size", "16x16"]), 2);
    assert_eq!(code(&["synth-data", "--out", s(&out), "--size", "16"]), 2);
}

#[test]
fn train_with_minimal_config_echoes_defaults_and_logs_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 2, "16x24");
    let out = dir.path().join("run");
    let o = ok(&["train", "--config", s(&tiny_config(dir.path())), "--data", s(&data), "--out", s(&out)]);
    let echo = echoed(&o);
    assert_eq!(echo["command"], "train");
    assert_eq!(echo["resolved"]["config"]["weights"]["lambda1"], 0.1);
    assert_eq!(echo["resolved"]["config"]["epochs"], 1);
    let log = read_log(&out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    for line in std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
    assert!(out.join(LAST_CHECKPOINT).is_file());
    assert!(out.join("config.json").is_file());
}

#[test]
fn bad_configs_and_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 1, "16x16");
    let out = dir.path().join("run");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = run(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let conflict = dir.path().join("conflict.json");
    std::fs::write(&conflict, r#"{"ablation": {"cross_distill": false, "uncertainty_rectify": true}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&conflict), "--data", s(&data), "--out", s(&out)]), 2);

    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&out), "--no-such-flag"]), 2);
    assert_eq!(code(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&out)]), 2);
}

#[test]
fn eval_handles_missing_data_stripped_and_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 2, "16x16");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&tiny_config(dir.path())), "--data", s(&data), "--out", s(&out)]);
    let full = out.join(LAST_CHECKPOINT);
    let ckpt = load_checkpoint(&full).unwrap();
    let stripped = dir.path().join("t.safetensors");
    ckpt.save_subset(&stripped, &["transformer"]).unwrap();
    let cnn_only = dir.path().join("c.safetensors");
    ckpt.save_subset(&cnn_only, &["cnn", "coupling"]).unwrap();

    let missing = dir.path().join("nope");
    let r = dir.path().join("r.json");
    assert_eq!(code(&["eval", "--checkpoint", s(&full), "--data", s(&missing), "--report", s(&r)]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&missing), "--data", s(&data), "--report", s(&r)]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&cnn_only), "--data", s(&data), "--report", s(&r)]), 3);

    let (ra, rb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&["eval", "--checkpoint", s(&full), "--data", s(&data), "--report", s(&ra)]);
    ok(&["eval", "--checkpoint", s(&stripped), "--data", s(&data), "--report", s(&rb)]);
    assert_eq!(std::fs::read(&ra).unwrap(), std::fs::read(&rb).unwrap());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&ra).unwrap()).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 12);
    let csv = std::fs::read_to_string(ra.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("id,pixel_count,abs_rel"));
}

#[test]
fn ablate_rejects_invalid_rows_and_keeps_request_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 1, "16x16");
    let out = dir.path().join("abl");
    let cfg = tiny_config(dir.path());
    assert_eq!(code(&["ablate", "--data", s(&data), "--out", s(&out), "--grid", "up"]), 2);
    assert_eq!(code(&["ablate", "--data", s(&data), "--out", s(&out), "--grid", "9"]), 2);
    ok(&["ablate", "--data", s(&data), "--out", s(&out), "--grid", "7,none,cd+cf", "--config", s(&cfg)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["7", "1", "-"]);
}

#[test]
fn augment_preview_writes_pairs_and_repeats_cuts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 1, "40x32");
    let preview = |name: &str| {
        let out = dir.path().join(name);
        ok(&["augment-preview", "--data", s(&data), "--out", s(&out), "--n", "3", "--seed", "2", "--cutflip-prob", "1.0"]);
        out
    };
    let a = preview("pa");
    let b = preview("pb");
    let files: Vec<_> = std::fs::read_dir(&a).unwrap().collect();
    assert_eq!(files.len(), 3 * 4 + 1);
    let sa: Value = serde_json::from_str(&std::fs::read_to_string(a.join("preview.json")).unwrap()).unwrap();
    let sb: Value = serde_json::from_str(&std::fs::read_to_string(b.join("preview.json")).unwrap()).unwrap();
    assert_eq!(sa, sb);
    for entry in sa.as_array().unwrap() {
        let cut = entry["record"]["cut"].as_u64().expect("cut applied at prob 1");
        let range = entry["cut_range"].as_array().unwrap();
        assert!(range[0].as_u64().unwrap() <= cut && cut <= range[1].as_u64().unwrap());
    }
    let out = dir.path().join("pc");
    assert_eq!(code(&["augment-preview", "--data", s(&data), "--out", s(&out), "--n", "9"]), 2);
}
