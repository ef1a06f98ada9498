use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    run_in(Path::new("."), args)
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconprune"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn reconprune")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(dir: &Path) {
    ok(&["datagen", "--count", "8", "--test-count", "4", "--size", "16", "--out", p(dir)]);
}

const TINY_MODEL: [&str; 8] = ["--patch-size", "8", "--hidden", "8", "--heads", "2", "--intermediate", "16"];

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--epochs", "1", "--batch-size", "4"];
    args.extend(TINY_MODEL);
    args.extend(extra);
    ok(&args);
}

#[test]
fn datagen_is_byte_deterministic() {
    // same relative output path so the recorded arguments match too
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = run_in(dir, &["datagen", "--count", "8", "--test-count", "4", "--size", "16", "--out", "data"]);
        assert!(out.status.success());
    }
    for f in ["train.nfgs", "test.nfgs", "datagen.json"] {
        let read = |d: &Path| fs::read(d.join("data").join(f)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{f}");
    }
    let meta: Value = serde_json::from_slice(&fs::read(a.path().join("data/datagen.json")).unwrap()).unwrap();
    assert_eq!(meta["meta"]["command"], "datagen");
    assert_eq!(meta["meta"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn prune_keeps_812_of_3249() {
    let out = ok(&["prune", "--ratio", "0.75", "--image-size", "456"]);
    let v = json_stdout(&out);
    assert_eq!(v["n"], 3249);
    assert_eq!(v["m"], 812);
    assert_eq!(v["kept_indices"].as_array().unwrap().len(), 812);
    assert_eq!(v["layout_total"], 812);
}

#[test]
fn prune_keep_and_text_layout() {
    let v = json_stdout(&ok(&["prune", "--keep", "10", "--text-len", "5"]));
    assert_eq!(v["m"], 10);
    assert_eq!(v["layout_visual"], 10);
    assert_eq!(v["layout_text"], 5);
    assert_eq!(v["layout_total"], 15);
}

#[test]
fn bench_reports_ratio() {
    let v = json_stdout(&ok(&["bench"]));
    assert_eq!(v["visual_unpruned"], 3249);
    assert_eq!(v["visual_pruned"], 812);
    let ratio = v["ratio"].as_f64().unwrap();
    assert!((7.0..=12.0).contains(&ratio), "{ratio}");
    assert!(v["ratio_with_overhead"].as_f64().unwrap() < ratio);
}

#[test]
fn train_eval_viz_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let run_dir = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    tiny_train(data.path(), run_dir.path(), &[]);
    let ckpt = run_dir.path().join("checkpoint.rpck");
    for f in ["checkpoint.rpck", "train_log.jsonl", "train.json"] {
        assert!(run_dir.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let csv = run_dir.path().join("rows.csv");
    let report = json_stdout(&ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(data.path()), "--csv", p(&csv)]));
    assert_eq!(report["samples"], 4);
    assert_eq!(report["ratios"].as_array().unwrap().len(), 3);
    assert!(report["reconstruction"].is_object());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let viz = run_dir.path().join("viz");
    ok(&["viz", "--checkpoint", p(&ckpt), "--data", p(data.path()), "--indices", "0,2", "--out", p(&viz)]);
    let mut files: Vec<String> = fs::read_dir(&viz)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files.len(), 8, "{files:?}");
    assert!(files.iter().all(|f| f.ends_with(".ppm")));
    for f in &files {
        assert!(fs::read(viz.join(f)).unwrap().starts_with(b"P6\n"));
    }

    let pruned = json_stdout(&ok(&["prune", "--checkpoint", p(&ckpt), "--data", p(data.path()), "--index", "1", "--ratio", "0.5"]));
    assert_eq!(pruned["n"], 4);
    assert_eq!(pruned["m"], 2);
}

#[test]
fn training_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_train(data.path(), a.path(), &[]);
    tiny_train(data.path(), b.path(), &[]);
    for f in ["checkpoint.rpck", "train_log.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_fills_defaults_and_flags_win() {
    let data = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# overrides\nlr = 0.002\nepochs = 3\nweight_decay = 0.05\n").unwrap();
    let out = dir.path().join("run");
    tiny_train(data.path(), &out, &["--config", p(&cfg), "--weight-decay", "0.1"]);
    let meta: Value = serde_json::from_slice(&fs::read(out.join("train.json")).unwrap()).unwrap();
    let c = &meta["meta"]["config"];
    assert_eq!(c["lr"], 0.002);
    // given on the command line in both places
    assert_eq!(c["epochs"], 1);
    assert_eq!(c["weight_decay"], 0.1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["prune", "--ratio", "1.5"]).status.code(), Some(2));
    assert_eq!(run(&["prune", "--ratio", "0.5", "--keep", "3"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.rpck");
    assert_eq!(run(&["eval", "--checkpoint", p(&missing), "--data", p(dir.path())]).status.code(), Some(2));
    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "epochs 3\n").unwrap();
    assert_eq!(run(&["bench", "--config", p(&bad_cfg)]).status.code(), Some(2));

    // image side not a multiple of the patch
    let data = dir.path().join("odd");
    ok(&["datagen", "--count", "2", "--test-count", "1", "--size", "20", "--out", p(&data)]);
    let out = run(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of patch size"));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    let out = run(&["train", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--lambda"));
}
