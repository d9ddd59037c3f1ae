use std::fs;
use std::process::Command;

fn treecam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treecam"))
}

#[test]
fn config_reflects_flags() {
    let out = treecam()
        .args(["config", "--canvas", "320", "--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("canvas = 320"));
    let other = treecam().args(["config", "--seed", "6"]).output().unwrap();
    assert_ne!(text, String::from_utf8(other.stdout).unwrap());
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nepoch = 3\n").unwrap();
    let out = treecam()
        .arg("config")
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    let out = treecam()
        .args(["config", "--canvas", "100"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn stage_command_runs_upstream_then_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[synth]\ntrees_per_species = 5\n").unwrap();
    let run = || {
        treecam()
            .env("RUST_LOG", "warn")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("out"))
            .arg("project")
            .output()
            .unwrap()
    };
    let first = run();
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("synth")));
    assert!(!text.contains("cached"));
    let second = String::from_utf8(run().stdout).unwrap();
    assert_eq!(second.lines().filter(|l| l.contains("cached")).count(), 2);
}
