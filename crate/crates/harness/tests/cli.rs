use std::fs;
use std::path::Path;
use std::process::Command;

use tsd_harness::cli::run;

fn tsd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsd"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const GEN: &str = r#"{"t_obs":6,"t_pred":6,"num_neighbors":2}"#;
const TRAIN: &str = r#"{"epochs":1,"batch_size":4,
  "model":{"d":8,"heads":2,"modes":2,"points":2,"t_obs":6,"t_pred":6},
  "mask_schedule":[{"pattern":"random","rate":0.5},{"pattern":"continuous","observed_len":2}]}"#;

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsd()
        .args([
            "eval",
            "--ckpt",
            "missing.bin",
            "--data",
            "none.jsonl",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = tsd().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(["tsd", "frobnicate"]), 2);
    assert_eq!(run(["tsd", "report"]), 2);
    assert_eq!(run(["tsd", "report", "--in", "/nonexistent/results"]), 1);
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(&p.join("gen.json"), GEN);
    write(&p.join("train.json"), TRAIN);
    write(
        &p.join("eval.json"),
        r#"{"random_rates":[0.0,0.5],"continuous_lengths":[1],"k_eval":2}"#,
    );
    let s = |x: &Path| x.to_str().unwrap().to_string();

    let code = run([
        "tsd".into(),
        "gen".into(),
        "--config".into(),
        s(&p.join("gen.json")),
        "--count".into(),
        "12".into(),
        "--out".into(),
        s(&p.join("data/train.jsonl")),
    ]);
    assert_eq!(code, 0);
    let lines = fs::read_to_string(p.join("data/train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);

    let code = run([
        "tsd".into(),
        "train".into(),
        "--config".into(),
        s(&p.join("train.json")),
        "--data".into(),
        s(&p.join("data/train.jsonl")),
        "--variant".into(),
        "tsd".into(),
        "--out".into(),
        s(&p.join("run")),
    ]);
    assert_eq!(code, 0);
    for f in ["ckpt.bin", "ckpt.json", "loss.csv"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(p.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);

    let code = run([
        "tsd".into(),
        "eval".into(),
        "--ckpt".into(),
        s(&p.join("run/ckpt.bin")),
        "--data".into(),
        s(&p.join("data/train.jsonl")),
        "--config".into(),
        s(&p.join("eval.json")),
        "--out".into(),
        s(&p.join("run")),
    ]);
    assert_eq!(code, 0);
    let mut cells: Vec<String> = fs::read_dir(p.join("run/eval"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    cells.sort();
    assert_eq!(
        cells,
        ["continuous_01.csv", "random_0.00.csv", "random_0.50.csv"]
    );
    let csv = fs::read_to_string(p.join("run/eval/random_0.50.csv")).unwrap();
    let mut it = csv.lines();
    assert_eq!(
        it.next().unwrap(),
        "variant,mask_pattern,parameter,min_ade,min_fde,miss_rate,n"
    );
    let row: Vec<&str> = it.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], ["tsd", "random", "0.50"]);
    assert_eq!(row[6], "12");
}

#[test]
fn bad_configs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(&p.join("bad.json"), r#"{"epochs":1,"no_such_field":3}"#);
    write(&p.join("d.jsonl"), "");
    let code = run([
        "tsd",
        "train",
        "--config",
        p.join("bad.json").to_str().unwrap(),
        "--data",
        p.join("d.jsonl").to_str().unwrap(),
        "--out",
        p.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}
