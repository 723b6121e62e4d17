use std::path::Path;
use std::process::{Command, Output};

use noisetransfer::ImagePatch;

fn noisetransfer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisetransfer")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn toy_dry_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = noisetransfer(&["validate-config", "--profile", "toy", "--dry-run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tau"));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[contrastive]\ntau = -1.0\n").unwrap();
    let out = noisetransfer(&["validate-config", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("contrastive.tau"), "{err}");
}

#[test]
fn sample_noise_writes_image_of_same_size() {
    let dir = tempfile::tempdir().unwrap();
    ImagePatch::filled(20, 30, 3, 0.5).save_png(&dir.path().join("clean.png")).unwrap();
    let out = noisetransfer(
        &["sample-noise", "--clean", "clean.png", "--kind", "gaussian", "--sigma", "25", "--seed", "3", "--out", "noisy.png"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let noisy = ImagePatch::load(&dir.path().join("noisy.png")).unwrap();
    assert_eq!(noisy.dims(), (20, 30, 3));
    assert!(noisy.data().iter().any(|&v| v != noisy.data()[0]));
}

#[test]
fn missing_sigma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ImagePatch::filled(8, 8, 3, 0.5).save_png(&dir.path().join("clean.png")).unwrap();
    let out = noisetransfer(&["sample-noise", "--clean", "clean.png", "--kind", "gaussian", "--out", "n.png"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("n.png").exists());
}
