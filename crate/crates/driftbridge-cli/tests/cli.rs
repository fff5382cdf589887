//! End-to-end checks against the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftbridge"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("driftbridge-cli-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "name": "cli-smoke",
            "dataset": { "kind": "gaussian-spiral", "n": 60, "dim": 3 },
            "method": "curly",
            "hidden": [8],
            "interp_epochs": 10,
            "bridge_epochs": 10,
            "batch_size": 8,
            "lr": 0.001,
            "integration_steps": 12,
            "seeds": [0]
        }"#,
    )
    .unwrap();
    path
}

#[test]
fn run_is_bitwise_deterministic() {
    let dir = workdir("determinism");
    let config = write_config(&dir);
    for out in ["a", "b"] {
        let status = bin()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.join("a/cli-smoke/metrics.csv")).unwrap();
    let b = std::fs::read(dir.join("b/cli-smoke/metrics.csv")).unwrap();
    assert_eq!(a, b, "metrics CSV differs across identical invocations");
}

#[test]
fn manifest_replays_through_the_binary() {
    let dir = workdir("replay");
    let config = write_config(&dir);
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("first"))
        .status()
        .unwrap();
    assert!(status.success());

    // feed the manifest back as the config
    let manifest = dir.join("first/cli-smoke/manifest.json");
    let status = bin()
        .args(["run", "--config"])
        .arg(&manifest)
        .arg("--out")
        .arg(dir.join("second"))
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read(dir.join("first/cli-smoke/metrics.csv")).unwrap();
    let b = std::fs::read(dir.join("second/cli-smoke/metrics.csv")).unwrap();
    assert_eq!(a, b, "replayed manifest produced different metrics");
}

#[test]
fn invalid_config_fails_before_any_training() {
    let dir = workdir("invalid");
    let path = dir.join("bad.json");
    std::fs::write(
        &path,
        r#"{
            "name": "bad",
            "dataset": { "kind": "gaussian-spiral", "n": 60, "dim": 3 },
            "method": "curly",
            "sigma": -2.0
        }"#,
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("sigma"), "diagnostic missing field name: {stderr}");
    assert!(!dir.join("out").exists(), "output written despite invalid config");
}

#[test]
fn checkpoint_reuse_matches_fresh_run() {
    let dir = workdir("checkpoint");
    let config = write_config(&dir);
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("fresh"))
        .status()
        .unwrap();
    assert!(status.success());

    let ckpt = dir.join("fresh/cli-smoke/seed_0/interpolant.json");
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.join("resumed"))
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read(dir.join("fresh/cli-smoke/metrics.csv")).unwrap();
    let b = std::fs::read(dir.join("resumed/cli-smoke/metrics.csv")).unwrap();
    assert_eq!(a, b, "stage-two results changed when stage one was skipped");
}

#[test]
fn simulate_plot_evaluate_round_trip() {
    let dir = workdir("pipeline");
    let config = write_config(&dir);
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .status()
        .unwrap();
    assert!(status.success());

    // export the source snapshot for the simulate entry point
    let start_csv = dir.join("start.csv");
    {
        use driftbridge::datasets::gen_gaussian_spiral;
        let (src, tgt, _) = gen_gaussian_spiral(60, 3, 1.0, 0).unwrap();
        std::fs::write(&start_csv, src.to_csv()).unwrap();
        std::fs::write(dir.join("truth.csv"), tgt.to_csv()).unwrap();
    }
    let drift = dir.join("run/cli-smoke/seed_0/drift.json");
    let status = bin()
        .args(["simulate", "--checkpoint"])
        .arg(&drift)
        .arg("--start")
        .arg(&start_csv)
        .args(["--steps", "12", "--span", "0,1"])
        .arg("--out")
        .arg(dir.join("sim"))
        .status()
        .unwrap();
    assert!(status.success());
    let traj = dir.join("sim/trajectory.csv");
    assert!(traj.exists());

    // plot twice: byte-identical SVGs
    for out in ["p1", "p2"] {
        let status = bin()
            .args(["plot", "--trajectory"])
            .arg(&traj)
            .args(["--field", r#"{"kind":"spiral","speed":0.2,"omega":3.141592653589793,"dim":3}"#])
            .arg("--out")
            .arg(dir.join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let svg1 = std::fs::read(dir.join("p1/trajectory.svg")).unwrap();
    let svg2 = std::fs::read(dir.join("p2/trajectory.svg")).unwrap();
    assert_eq!(svg1, svg2, "SVG not byte-identical across reruns");
    assert!(dir.join("p1/field.svg").exists());

    let status = bin()
        .args(["evaluate", "--trajectory"])
        .arg(&traj)
        .arg("--truth")
        .arg(dir.join("truth.csv"))
        .args(["--field", r#"{"kind":"spiral","speed":0.2,"omega":3.141592653589793,"dim":3}"#])
        .arg("--checkpoint")
        .arg(&drift)
        .arg("--out")
        .arg(dir.join("eval"))
        .status()
        .unwrap();
    assert!(status.success());
    let eval = std::fs::read_to_string(dir.join("eval/evaluation.csv")).unwrap();
    assert!(eval.contains("w2,"));
    assert!(eval.contains("cos_dist,"));
}

#[test]
fn env_var_overrides_output_root() {
    let dir = workdir("envvar");
    let config = write_config(&dir);
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .env("DRIFTBRIDGE_OUT", dir.join("from-env"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("from-env/cli-smoke/metrics.csv").exists());
}
