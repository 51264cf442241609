use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn slgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slgs"))
        .args(args)
        .env("SLGS_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) -> PathBuf {
    let out = slgs(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--objects",
        "2",
        "--size",
        "32",
        "--embed-dim",
        "16",
        "--held-out",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8(out.stdout).unwrap();
    PathBuf::from(printed.trim())
}

#[test]
fn synth_then_validate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    assert!(manifest.exists());
    let out = slgs(&["validate", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_manifest_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, "{").unwrap();
    let out = slgs(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_image_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    std::fs::remove_file(dir.path().join("images/view0.png")).unwrap();
    let out = slgs(&["validate", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("view0.png"));
}

#[test]
fn unknown_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = slgs(&["align", "--manifest", manifest.to_str().unwrap(), "--config-override", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_without_prerequisites_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = slgs(&["train-sem", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("align"));
}

#[test]
fn run_chains_every_stage_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let m = manifest.to_str().unwrap();
    let out = slgs(&[
        "run",
        "--manifest",
        m,
        "--stage",
        "eval",
        "--config-override",
        "iterations_rgb=60",
        "--config-override",
        "iterations_sem=40",
        "--config-override",
        "semantic_warmup=10",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["render"]["training_psnr"].as_f64().unwrap().is_finite());
    assert!(report["queries"]["results"].as_array().is_some_and(|r| !r.is_empty()));
    for file in ["alignment.json", "checkpoint_rgb.ply", "checkpoint_sem.ply", "cameras.json", "eval_report.json"] {
        assert!(dir.path().join("out").join(file).exists(), "{file} missing");
    }

    // later stages pick up artifacts recorded by earlier ones
    let out = slgs(&["render", "--manifest", m]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/renders/view0.png").exists());
    let out = slgs(&["query", "--manifest", m]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/query_report.json").exists());
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_slgs"))
        .args(["validate", "--manifest", "x.json"])
        .env("SLGS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
