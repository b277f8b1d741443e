//! Binary-level checks of the pipeline's failure paths: stage ordering,
//! artifact provenance, and config validation. The happy path is covered by
//! the determinism test in the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, name: &str, msl: usize, mode: &str, calibration: &str) -> PathBuf {
    let out_dir = dir.join("out");
    let config = serde_json::json!({
        "dataset": {
            "kind": "synthetic",
            "spec": {
                "n_samples": 300,
                "n_factors": 2,
                "bins_per_factor": 2,
                "revealed_groups": [0],
                "feature_dim": 6,
                "feature_noise_sigma": 0.05,
                "concept_flip_prob": 0.0,
                "n_classes": 3,
                "seed": 0
            }
        },
        "fractions": [0.7, 0.15, 0.15],
        "seed": 4,
        "msl": msl,
        "mode": mode,
        "concept_mode": "predicted",
        "calibration": calibration,
        "predictor": {
            "arch": { "hidden": [8], "activation": "relu" },
            "hyper": { "epochs": 2 }
        },
        "out_dir": out_dir.to_str().unwrap()
    });
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run(config: &Path, sub: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcbm"))
        .arg("--config")
        .arg(config)
        .arg(sub)
        .output()
        .expect("binary runs")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn missing_artifacts_name_the_stage_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "cfg.json", 10, "seq", "none");

    // Nothing generated yet: every downstream stage points back at synth.
    let out = run(&config, "eval");
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.contains("missing artifact") && err.contains("run `mcbm synth` first"),
        "unexpected stderr: {err}"
    );

    // With the dataset in place, fit complains about the missing predictor.
    assert!(run(&config, "synth").status.success());
    let out = run(&config, "fit");
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.contains("missing artifact") && err.contains("run `mcbm train` first"),
        "unexpected stderr: {err}"
    );
}

#[test]
fn stale_artifacts_are_rejected_after_config_change() {
    let tmp = tempfile::tempdir().unwrap();
    let before = write_config(tmp.path(), "before.json", 10, "seq", "none");
    let after = write_config(tmp.path(), "after.json", 11, "seq", "none");

    assert!(run(&before, "synth").status.success());
    let out = run(&after, "train");
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.contains("was produced by config") && err.contains("rerun `mcbm synth`"),
        "unexpected stderr: {err}"
    );
}

#[test]
fn joint_mode_with_calibration_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "cfg.json", 10, "joint", "platt-temp");

    let out = run(&config, "synth");
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.contains("joint sources are never calibrated"),
        "unexpected stderr: {err}"
    );
}
