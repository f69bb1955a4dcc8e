//! CLI behavior: exit codes and smoke runs of every subcommand.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
}

fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let json = r#"{
        "data": {"n": 90, "task": {"kind": "dec", "classes": 3}, "latent_dim": 4,
                 "d_s": 8, "d_t": 8, "noise_s": 0.8, "noise_t": 0.2, "seed": 42},
        "model": {"hidden": 8, "embed_dim": 4},
        "optimizer": {"epochs": 3, "patience": 0},
        "al": {"weights": {"sim": 1.0, "rel": 1.0, "task": 1.0},
               "acquisition": {"ratio": 0.2, "rounds": 2},
               "epochs_per_round": 3},
        "seeds": [7]
    }"#;
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"data": {"n": 10}, "unknown_knob": true}"#).unwrap();
    let out = bin().args(["kd", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "{stderr}");
}

#[test]
fn missing_config_file_is_an_io_failure() {
    let out = bin().args(["kd", "--config", "/nonexistent/nope.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_of_range_value_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("range.json");
    std::fs::write(
        &path,
        r#"{"data": {"n": 90, "task": {"kind": "dec", "classes": 3}, "latent_dim": 4,
            "d_s": 8, "d_t": 8, "noise_s": 0.8, "noise_t": 0.2, "seed": 42},
            "kd": {"weights": {"sim": -1.0, "unc": 1.0, "kd": 1.0, "task": 1.0}}}"#,
    )
    .unwrap();
    let out = bin().args(["kd", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn every_subcommand_smoke_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for sub in ["kd", "al", "ablation", "label-efficiency"] {
        let out = bin()
            .args([sub, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = bin().args(["gradcheck"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("total instances"), "{stdout}");
    let out = bin().args(["selftest"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest passed"));
}

#[test]
fn env_var_sets_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let target = dir.path().join("env_out");
    let out = bin()
        .args(["kd", "--config"])
        .arg(&cfg)
        .env("XMODAL_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("results.csv").exists());
    assert!(target.join("summary.json").exists());
}
