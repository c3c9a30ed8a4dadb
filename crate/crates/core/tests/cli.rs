//! Exit codes and diagnostics of the `ptame` binary.

use std::process::Command;

fn ptame(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ptame"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(ptame(&["frobnicate"]).0, 2);
    assert_eq!(ptame(&[]).0, 2);
    assert_eq!(ptame(&["explain", "--bogus"]).0, 2);
}

#[test]
fn help_succeeds() {
    assert_eq!(ptame(&["--help"]).0, 0);
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "batch_size = 8\nseed = 1\nlambda1 = 0.5\nlambda2 = 0.3\nlambda_area = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let (code, err) = ptame(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--models",
        "nowhere",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("max_lr"), "{err}");
    std::fs::write(
        &cfg,
        "batch_size = 8\nmax_lr = 1e-3\nseed = 1\nlambda1 = 0.5\nlambda_area = 1\n",
    )
    .unwrap();
    let (code, err) = ptame(&[
        "sanity",
        "--config",
        cfg.to_str().unwrap(),
        "--models",
        "m",
        "--attention",
        "a",
        "--out",
        "o",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("lambda2"), "{err}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let (code, err) = ptame(&[
        "hpsearch",
        "--config",
        "/nonexistent/x.cfg",
        "--models",
        "m",
        "--out",
        "o",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("x.cfg"), "{err}");
}

#[test]
fn missing_models_fail_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = ptame(&[
        "evaluate",
        "--models",
        dir.path().to_str().unwrap(),
        "--explainer",
        "random",
        "--out",
        "o",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("backbone"), "{err}");
}
