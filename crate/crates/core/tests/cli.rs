use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_feedback-opf"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn run_then_evaluate_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("art");
    let status = bin()
        .arg("run")
        .arg(config("feeder8.toml"))
        .args(["--set", "trainer.epochs=2", "--set"])
        .arg(format!("output.dir={}", out.display()))
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["report.csv", "policy.txt", "training_log.csv", "trajectory_proposed.csv", "manifest.txt", "timing.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let before = std::fs::read_to_string(out.join("report.csv")).unwrap();

    let eval = bin()
        .arg("evaluate")
        .arg(config("feeder8.toml"))
        .arg("--dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(eval.status.success());
    assert_eq!(String::from_utf8(eval.stdout).unwrap(), before);
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), before);
}

#[test]
fn build_feeder_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("build-feeder")
        .arg(config("feeder8.toml"))
        .arg("--set")
        .arg(format!("output.dir={}", tmp.path().display()))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("buses=7"), "{text}");
    assert!(tmp.path().join("sensitivity_r.csv").is_file());
}

#[test]
fn bad_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[trainer]\nalpha = \"fast\"\n").unwrap();
    let status = bin().arg("check-conditions").arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let status = bin().arg("run").arg(config("feeder8.toml")).args(["--set", "trainer.nonsense=1"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
