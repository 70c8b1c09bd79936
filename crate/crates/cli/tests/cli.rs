use std::path::Path;
use std::process::{Command, Output};

fn vloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vloc")).args(args).output().expect("vloc runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn synth_meets_the_noiseless_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = vloc(&["synth", "--frames", "100", "--noise", "0", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path());
    assert_eq!(s["frames"], 100);
    assert!(s["metrics"]["rms_horizontal"].as_f64().unwrap() <= 0.025);
    assert!(s["metrics"]["rms_yaw_deg"].as_f64().unwrap() <= 0.05);
    for f in ["results.csv", "estimates.csv", "ground_truth.csv", "world.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn dataset_round_trip_through_build_map_localize_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let map = dir.path().join("map.alm");
    let ok = |out: Output| assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ok(vloc(&["synth", "--frames", "4", "--dataset", path(&data)]));
    ok(vloc(&["build-map", "--dataset", path(&data), "--out", path(&map)]));
    ok(vloc(&["localize", "--dataset", path(&data), "--map", path(&map), "--out", path(&run)]));
    assert_eq!(std::fs::read_to_string(run.join("localization.csv")).unwrap().lines().count(), 5);
    ok(vloc(&[
        "eval",
        "--estimates",
        path(&run.join("estimates.csv")),
        "--ground-truth",
        path(&data.join("query/trajectory.csv")),
        "--out",
        path(&run),
    ]));
    let s = summary(&run);
    assert_eq!(s["frames"], 4);
    assert!(s["metrics"]["rms_horizontal"].as_f64().unwrap() <= 0.025);
}

#[test]
fn eval_on_empty_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("estimates.csv");
    let gt = dir.path().join("gt.csv");
    std::fs::write(&est, "timestamp,x,y,z,qw,qx,qy,qz\n").unwrap();
    std::fs::write(&gt, "timestamp,x,y,z,qw,qx,qy,qz\n0,0,0,0,1,0,0,0\n").unwrap();
    let out = vloc(&["eval", "--estimates", path(&est), "--ground-truth", path(&gt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = vloc(&["ablate", "--frames", "4", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, want) in rows.iter().zip(["FPS,Reduce", "FPS,Weighted", "WFPS,Reduce", "WFPS,Weighted"]) {
        assert!(row.starts_with(want), "{row}");
    }
}

#[test]
fn bad_config_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "frames = 3\nmarginalization = median\n").unwrap();
    let out = vloc(&["synth", "--config", path(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.cfg:2"));
}
