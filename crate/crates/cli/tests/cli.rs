use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[phantom]
height = 160
width = 64

[net]
patch_width = 32
base_channels = 2
levels = 2

[snet.schedule]
epochs = 1

[rnet.schedule]
epochs = 1

[infer]
patch_count = 3
"#;

fn laminet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laminet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = laminet(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = workspace();
    assert_eq!(laminet(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(laminet(dir.path(), &["gen-data"]).status.code(), Some(2));
    assert_eq!(laminet(dir.path(), &["eval", "--pred", "x"]).status.code(), Some(2));
    assert_eq!(laminet(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_input_reports_one_line_with_kind() {
    let dir = workspace();
    fs::write(dir.path().join("bad.toml"), "[net]\nlevels = 0\n").unwrap();
    let out = laminet(dir.path(), &["--config", "bad.toml", "gen-data", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let out = laminet(dir.path(), &["eval", "--pred", "missing", "--truth", "missing", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[io]: "));
}

#[test]
fn full_pipeline_on_a_tiny_configuration() {
    let dir = workspace();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    let run = |rest: &[&str]| ok(d, &[&c[..], rest].concat());

    run(&["gen-data", "--count", "4", "--out", "train"]);
    run(&["--seed", "4", "gen-data", "--count", "2", "--out", "test"]);
    assert!(d.join("train/manifest.json").is_file());

    run(&["train-snet", "--data", "train", "--val", "test", "--out", "snet.lmn"]);
    run(&["train-rnet", "--data", "train", "--out", "rnet.lmn"]);
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("snet.lmn.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 3);
    assert_eq!(sidecar["curve"].as_array().unwrap().len(), 1);

    run(&["infer", "--data", "test", "--snet", "snet.lmn", "--rnet", "rnet.lmn", "--out", "pred"]);
    run(&["infer", "--data", "test", "--snet", "snet.lmn", "--out", "pred_fresh"]);
    let table = run(&["eval", "--pred", "pred", "--truth", "test", "--baseline", "pred_fresh", "--out", "report"]);
    assert!(table.contains("MAD"), "{table}");
    let csv = fs::read_to_string(d.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 + 1, "{csv}");

    run(&["render", "--data", "test", "--pred", "pred", "--snet", "snet.lmn", "--limit", "1", "--out", "img"]);
    assert!(d.join("img/scan_00000.pgm").is_file());
    assert!(d.join("img/scan_00000_overlay.ppm").is_file());
    assert!(d.join("img/scan_00000_prob_09.pgm").is_file());
    assert!(!d.join("img/scan_00001.pgm").exists());

    let bench = run(&["bench", "--snet", "snet.lmn", "--data", "test", "--runs", "1", "--out", "bench.txt"]);
    assert!(bench.contains("inference"), "{bench}");
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    let c = ["--config", "tiny.toml", "--deterministic"];
    let run = |rest: &[&str]| ok(d, &[&c[..], rest].concat());
    run(&["gen-data", "--count", "3", "--out", "data"]);
    for tag in ["a", "b"] {
        run(&["train-snet", "--data", "data", "--out", &format!("{tag}/snet.lmn")]);
        run(&["infer", "--data", "data", "--snet", &format!("{tag}/snet.lmn"), "--out", &format!("{tag}/pred")]);
        run(&["eval", "--pred", &format!("{tag}/pred"), "--truth", "data", "--out", &format!("{tag}/report")]);
    }
    for file in ["snet.lmn", "snet.lmn.json", "report/report.csv", "report/report.txt", "pred/pred_00000.lmn"] {
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn gradcheck_passes_and_writes_json() {
    let dir = workspace();
    let out = ok(dir.path(), &["gradcheck", "--instances", "2", "--out", "gc.json"]);
    assert!(out.contains("rnet_reduced"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gc.json")).unwrap()).unwrap();
    assert!(v["results"].as_array().unwrap().len() > 10);
}

#[test]
fn truth_against_itself_scores_zero() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "gen-data", "--count", "2", "--out", "data"]);
    ok(d, &["eval", "--pred", "data", "--truth", "data", "--out", "report"]);
    let csv = fs::read_to_string(d.join("report/report.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[2..7].iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{row}");
    }
}
