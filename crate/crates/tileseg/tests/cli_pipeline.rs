//! Integration tests driving the actual `tileseg` binary.

use std::path::Path;
use std::process::{Command, Output};

fn tileseg(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tileseg"))
        .args(args)
        .arg("--out")
        .arg(out_dir)
        .output()
        .expect("binary runs")
}

const MINI: &[&str] = &[
    "--set", "n_slides=5",
    "--set", "synth.width=256",
    "--set", "synth.height=256",
    "--set", "synth.patch_size=32",
    "--set", "arch.crop_size=28",
    "--set", "arch.conv_channels=4,8",
    "--set", "arch.feature_dim=8",
    "--set", "arch.seg_channels=8",
    "--set", "arch.seg_bottleneck=16",
    "--set", "arch.map_h=8",
    "--set", "arch.map_w=8",
    "--set", "train.epochs_extractor=1",
    "--set", "train.epochs_segmentation=2",
    "--set", "train.epochs_e2e=1",
    "--set", "train.batch_size=16",
    "--set", "eval.split=all",
];

fn run_ok(cmd: &str, out_dir: &Path) {
    let mut args = vec![cmd];
    args.extend_from_slice(MINI);
    let output = tileseg(&args, out_dir);
    assert!(
        output.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn full_pipeline_completes_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "synth",
        "preprocess",
        "train-classifier",
        "extract-features",
        "train-seg",
        "train-e2e",
        "predict",
        "eval",
        "render-heatmap",
    ] {
        run_ok(cmd, dir.path());
    }
    assert!(dir.path().join("metrics/summary.txt").exists());
    assert!(dir.path().join("manifests/eval.manifest").exists());
}

#[test]
fn rerunning_a_stage_from_its_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "preprocess", "train-classifier"] {
        run_ok(cmd, dir.path());
    }
    let ckpt = dir.path().join("checkpoints/extractor.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    // the stage manifest doubles as a config file
    let manifest = dir.path().join("manifests/train-classifier.manifest");
    let output = tileseg(
        &["train-classifier", "--config", manifest.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let after = std::fs::read(&ckpt).unwrap();
    assert_eq!(before, after, "manifest replay produced a different checkpoint");
}

#[test]
fn synth_twice_produces_an_identical_dataset_tree() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let mut args = vec!["synth", "--seed", "0"];
        args.extend_from_slice(MINI);
        let out = tileseg(&args, dir.path());
        assert!(out.status.success());
    }
    let manifest_a = std::fs::read(dir_a.path().join("dataset.manifest")).unwrap();
    let manifest_b = std::fs::read(dir_b.path().join("dataset.manifest")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    for entry in std::fs::read_dir(dir_a.path().join("slides")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir_a.path().join("slides").join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join("slides").join(&name)).unwrap();
        assert_eq!(a, b, "slide {name:?} differs");
    }
}

#[test]
fn train_e2e_without_warm_start_names_the_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    run_ok("synth", dir.path());
    run_ok("preprocess", dir.path());
    let mut args = vec!["train-e2e"];
    args.extend_from_slice(MINI);
    let output = tileseg(&args, dir.path());
    assert!(!output.status.success(), "train-e2e should fail without checkpoints");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("checkpoints/extractor.ckpt") && stderr.contains("checkpoints/seg.ckpt"),
        "diagnostic does not name the missing files: {stderr}"
    );
    assert!(stderr.contains("allow_cold_start"), "no cold-start hint: {stderr}");
}

#[test]
fn stage_with_missing_inputs_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = tileseg(&["preprocess"], dir.path());
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("dataset.manifest"), "stderr: {stderr}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let output = tileseg(&["synth", "--set", "train.bogus=1"], dir.path());
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.txt");
    std::fs::write(&cfg_path, "n_slides = 5\nsynth.width = 256\nsynth.height = 256\nsynth.patch_size = 32\n").unwrap();
    let output = tileseg(
        &[
            "synth",
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "42",
        ],
        dir.path(),
    );
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let manifest = std::fs::read_to_string(dir.path().join("dataset.manifest")).unwrap();
    assert!(manifest.contains("seed = 42"));
    assert!(manifest.contains("synth.width = 256"));
}
