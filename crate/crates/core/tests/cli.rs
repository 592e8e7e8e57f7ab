use std::fs;
use std::path::Path;

use scene4d::cli::main_with_args;
use scene4d::io::{load_reconstruction, load_scene};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["scene4d", "--log-level", "warn"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn first_tensor(dir: &Path) -> Option<std::path::PathBuf> {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    entries.iter().find(|p| p.is_file() && p.extension().is_some_and(|e| e != "json")).cloned()
        .or_else(|| entries.iter().filter(|p| p.is_dir()).find_map(|d| first_tensor(d)))
}

#[test]
fn synth_reconstruct_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let rec = tmp.path().join("rec");
    let metrics = tmp.path().join("metrics.json");
    let ply = tmp.path().join("out/cloud.ply");

    assert_eq!(run(&["synth", "--preset", "small", "--seed", "1", "--output", &s(&scene)]), 0);
    assert!(scene.join("config.json").is_file());
    let data = load_scene(&scene).unwrap();
    assert!(data.ground_truth.is_some());

    let code = run(&["reconstruct", "--input", &s(&scene), "--output", &s(&rec), "--stage1-iters", "20", "--stage2-iters", "10"]);
    assert_eq!(code, 0);
    assert!(!rec.join("FAILED").exists());
    let trace = fs::read_to_string(rec.join("loss_trace.txt")).unwrap();
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 30);
    let out = load_reconstruction(&rec).unwrap();
    assert_eq!(out.num_frames(), data.num_frames());

    assert_eq!(run(&["eval", "--pred", &s(&rec), "--gt", &s(&scene), "--json", &s(&metrics)]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(report["pose"]["ate"].as_f64().unwrap().is_finite());

    assert_eq!(run(&["export", "--input", &s(&rec), "--output", &s(&ply), "--dynamic", "flag"]), 0);
    let text = fs::read_to_string(&ply).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
    assert!(text.contains("property uchar red"));
}

#[test]
fn invalid_arguments_exit_one() {
    assert_eq!(run(&["reconstruct", "--input", "a", "--output", "b", "--lr", "-1"]), 1);
    assert_eq!(run(&["reconstruct", "--input", "a", "--output", "b", "--stage1-iters", "0"]), 1);
    assert_eq!(run(&["synth", "--preset", "huge", "--output", "x"]), 1);
    assert_eq!(run(&["--workers", "0", "synth", "--output", "x"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
}

#[test]
fn missing_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    let code = run(&["reconstruct", "--input", &s(&tmp.path().join("nope")), "--output", &s(&rec)]);
    assert_ne!(code, 0);
    assert_eq!(run(&["eval", "--pred", &s(&rec), "--gt", &s(&tmp.path().join("nope"))]), code);
}

#[test]
fn corrupt_tensor_fails_load() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert_eq!(run(&["synth", "--preset", "small", "--output", &s(&scene)]), 0);
    let victim = first_tensor(&scene).expect("scene has tensor files");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_scene(&scene).is_err());
    let code = run(&["reconstruct", "--input", &s(&scene), "--output", &s(&tmp.path().join("rec"))]);
    assert_ne!(code, 0);
}
