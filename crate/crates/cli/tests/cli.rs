//! The `auto4d` binary end to end on the small configuration.

use std::path::Path;
use std::process::{Command, Output};

use auto4d_core::eval::{PipelineConfig, Report};
use auto4d_core::store::{list_scenes, read_trajectories, scene_dir};

fn auto4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auto4d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = auto4d(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_train_refine_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = d.join("small.json");
    std::fs::write(&cfg_path, ok(&["config", "--small"])).unwrap();
    let cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(&cfg_path).unwrap()).unwrap();
    assert_eq!(cfg, PipelineConfig::small());
    let config = s(&cfg_path);

    let store = d.join("store");
    ok(&["simulate", "--config", config, "--store", s(&store)]);
    let ids = list_scenes(&store).unwrap();
    assert_eq!(ids, vec!["0004".to_string(), "0005".to_string()]);
    let scene = scene_dir(&store, &ids[0]);
    let init_before = std::fs::read(scene.join("init.json")).unwrap();
    ok(&["track", "--config", config, "--scene", s(&scene)]);
    assert_eq!(std::fs::read(scene.join("init.json")).unwrap(), init_before);

    let ck = d.join("ck");
    ok(&["train", "--config", config, "--out", s(&ck)]);
    let (size, path) = (ck.join("size.a4dp"), ck.join("path.a4dp"));
    assert!(size.is_file() && path.is_file());

    let out = ok(&["refine-size", "--config", config, "--scene", s(&scene), "--ckpt", s(&size), "--align", "center"]);
    assert!(out.contains("refined:"));
    let sized = read_trajectories(&scene.join("refined_size.json")).unwrap();
    for t in &sized {
        assert!(t.detections.iter().all(|d| d.size == t.detections[0].size));
    }
    ok(&["refine-path", "--config", config, "--scene", s(&scene), "--ckpt", s(&path)]);
    let refined = read_trajectories(&scene.join("refined.json")).unwrap();
    assert_eq!(refined.len(), sized.len());
    assert!(refined.iter().all(|t| t.static_flag.is_some()));
    let bad_window = auto4d(&["refine-path", "--config", config, "--scene", s(&scene), "--ckpt", s(&path), "--window", "8"]);
    assert!(!bad_window.status.success());

    let ev = d.join("eval");
    let gated = auto4d(&[
        "eval", "--config", config, "--out", s(&ev), "--size-ckpt", s(&size), "--path-ckpt", s(&path), "--gate",
    ]);
    let stdout = String::from_utf8_lossy(&gated.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")).collect();
    assert_eq!(lines.len(), 6, "{stdout}");
    let any_fail = lines.iter().any(|l| l.starts_with("FAIL "));
    assert_eq!(gated.status.success(), !any_fail);

    let report: Report = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config_digest, cfg.digest());
    assert!(report.size_training.is_none());
    let md = d.join("again.md");
    ok(&["report", "--input", s(&ev.join("report.json")), "--out", s(&md)]);
    assert_eq!(std::fs::read(&md).unwrap(), std::fs::read(ev.join("report.md")).unwrap());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!auto4d(&["refine-size", "--scene", "nowhere", "--ckpt", "missing.a4dp"]).status.success());
    assert!(!auto4d(&["report", "--input", dir.path().join("none.json").to_str().unwrap()]).status.success());
    assert!(!auto4d(&["serve", "--store", dir.path().join("none").to_str().unwrap()]).status.success());
    assert!(!auto4d(&["simulate", "--store", "x", "--split", "nope"]).status.success());
}
