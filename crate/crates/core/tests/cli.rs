use std::path::Path;
use std::process::{Command, Output};

fn occdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occdet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_config(path: &Path, extra: &str) {
    let base = r#""scene": {"grid": {"origin": [-8.0, -8.0, 0.0], "voxel_size": [1.0, 1.0, 1.0], "dims": [16, 16, 4]}, "objects": [2, 2]},
        "eval": {"query_points": 100}"#;
    std::fs::write(path, format!("{{{base}{extra}}}")).unwrap();
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, r#", "steps": 2"#);
    let scenes = dir.path().join("scenes");
    let run = dir.path().join("run");
    let ck = run.join("checkpoint");

    let out = occdet(&["synth", "--spec", arg(&cfg), "--out", arg(&scenes), "--count", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(scenes.join("scene_000").is_dir() && scenes.join("scene_001").is_dir());

    let out = occdet(&["train", "--config", arg(&cfg), "--out", arg(&run), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("log.ndjson").is_file() && ck.join("manifest.json").is_file());

    let report = dir.path().join("report.json");
    let out = occdet(&["eval", "--checkpoint", arg(&ck), "--scenes", arg(&scenes), "--out", arg(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("NDS"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["nds"].is_number());

    let renders = dir.path().join("renders");
    let out = occdet(&["render", "--checkpoint", arg(&ck), "--scene", arg(&scenes.join("scene_000")), "--out", arg(&renders)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let boxes = std::fs::read(renders.join("boxes.ppm")).unwrap();
    assert!(boxes.starts_with(b"P6\n"));
    assert!(std::fs::read(renders.join("heatmap.pgm")).unwrap().starts_with(b"P5\n"));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, r#", "steps": 1"#);
    let logs: Vec<String> = ["1", "1", "2"]
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let run = dir.path().join(format!("run{i}"));
            assert!(occdet(&["train", "--config", arg(&cfg), "--out", arg(&run), "--seed", seed]).status.success());
            std::fs::read_to_string(run.join("log.ndjson")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_ne!(logs[0], logs[2]);
}

#[test]
fn validation_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"flags": {"use_occ_head": false, "use_det_head": false}}"#).unwrap();
    let out = occdet(&["train", "--config", arg(&cfg), "--out", arg(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(occdet(&["synth", "--spec", arg(&cfg), "--out", arg(dir.path())]).status.code(), Some(2));
    assert_eq!(occdet(&["gradcheck", "--op", "no_such_op"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, r#", "optimizer": {"kind": "sgd", "lr": 1e30, "momentum": 0.0}, "grad_clip": null, "steps": 10"#);
    let run = dir.path().join("run");
    let out = occdet(&["train", "--config", arg(&cfg), "--out", arg(&run)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("log.ndjson")).unwrap();
    assert!(log.lines().last().unwrap().contains("non_finite"));
}

#[test]
fn missing_checkpoint_exits_with_1() {
    let out = occdet(&["eval", "--checkpoint", "/nonexistent/ck", "--scenes", "/nonexistent/scenes"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_one_operation_and_config_dump() {
    let out = occdet(&["gradcheck", "--op", "dense", "--seeds", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("dense") && text.contains("ok"));

    let out = occdet(&["config", "--tiny", "--seed", "9"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["steps"], 300);
}
