//! End-to-end tests of the `avjoint` binary: exit codes, artifact
//! determinism, resume semantics, and the gamma sweep.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_avjoint")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn avjoint")
}

fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "version": 1,
        "data": {
            "n_frames": 8, "video_dim": 3, "audio_frames": 16, "audio_dim": 3,
            "max_events": 2, "jitter": 0.0, "n_labels": 2, "n_samples": 24, "seed": 5
        },
        "model": {
            "hidden_dim": 16, "n_layers": 1, "n_inject_sites": 1,
            "inject_mode": "cmc_pe", "label_dim": 8, "time_dim": 8,
            "connector_hidden": 12, "connector_out": 8
        },
        "schedules": {
            "video": { "kind": "linear", "t_max": 50, "beta_start": 0.0015, "beta_end": 0.0195 },
            "audio": { "kind": "scaled_linear", "t_max": 40, "beta_start": 0.00085, "beta_end": 0.012 }
        },
        "timestep_map": { "t_global": 10, "gamma": 1.5 },
        "train": {
            "lr": 3e-4, "batch_size": 8, "epochs": epochs, "seed": 1, "save_every": 100
        },
        "generate": { "n_samples": 4, "guidance_v": 7.5, "guidance_a": 2.5, "seed": 3 },
        "paths": { "dataset": "data.bin", "checkpoint_dir": "ckpt", "out_dir": "out" }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn make_data_happy_path_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let out = run_in(dir.path(), &["make-data", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data.bin").exists());
    let bytes_a = std::fs::read(dir.path().join("data.bin")).unwrap();

    let out = run_in(
        dir.path(),
        &["make-data", "--config", cfg.to_str().unwrap(), "--out", "data2.bin"],
    );
    assert!(out.status.success());
    let bytes_b = std::fs::read(dir.path().join("data2.bin")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same config must produce identical files");
}

#[test]
fn missing_field_names_the_field_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(
        &path,
        r#"{"version": 1, "data": {"n_frames": 8}, "paths": {"dataset": "d", "checkpoint_dir": "c", "out_dir": "o"}}"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["make-data", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing field"), "stderr: {stderr}");
    assert!(stderr.contains("video_dim"), "stderr: {stderr}");
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extra.json");
    std::fs::write(&path, r#"{"version": 1, "extra_knob": 3}"#).unwrap();
    let out = run_in(dir.path(), &["make-data", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra_knob"));
}

#[test]
fn train_with_bad_dataset_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let out = run_in(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));
}

#[test]
fn full_pipeline_with_resume_sweep_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let cfg_s = cfg.to_str().unwrap();

    let out = run_in(dir.path(), &["make-data", "--config", cfg_s]);
    assert!(out.status.success());

    let out = run_in(dir.path(), &["train", "--config", cfg_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("ckpt/latest.ckpt");
    assert!(ckpt.exists());
    let loss_csv = std::fs::read_to_string(dir.path().join("ckpt/loss.csv")).unwrap();
    assert_eq!(loss_csv.lines().count(), 3, "header + 2 epochs");

    // Resume continues the epoch numbering.
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--config",
            cfg_s,
            "--resume",
            ckpt.to_str().unwrap(),
            "--epochs",
            "1",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loss_csv = std::fs::read_to_string(dir.path().join("ckpt/loss.csv")).unwrap();
    let last = loss_csv.lines().last().unwrap();
    assert!(last.starts_with("3,"), "resumed epoch numbering, got {last}");

    // Generation is seed-deterministic, and the gamma sweep runs.
    let ckpt_s = ckpt.to_str().unwrap();
    for gamma in ["1.0", "1.25", "1.5", "1.75", "2.0"] {
        let out = run_in(
            dir.path(),
            &[
                "generate", "--checkpoint", ckpt_s, "--out-dir", "sweep",
                "--n-samples", "2", "--seed", "11", "--gamma", gamma,
                "--t-steps", "6",
            ],
        );
        assert!(
            out.status.success(),
            "gamma {gamma}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = run_in(
        dir.path(),
        &[
            "generate", "--checkpoint", ckpt_s, "--out-dir", "gen_a",
            "--n-samples", "2", "--seed", "11", "--t-steps", "6",
        ],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &[
            "generate", "--checkpoint", ckpt_s, "--out-dir", "gen_b",
            "--n-samples", "2", "--seed", "11", "--t-steps", "6",
        ],
    );
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("gen_a/samples.bin")).unwrap(),
        std::fs::read(dir.path().join("gen_b/samples.bin")).unwrap(),
        "fixed seed must reproduce sample files bitwise"
    );
    assert!(dir.path().join("gen_a/metrics.json").exists());

    // Eval with a reference emits moment distances.
    let out = run_in(
        dir.path(),
        &[
            "eval", "--samples", "gen_a/samples.bin", "--ref", "data.bin",
        ],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("moment_distance_video"));

    // Profile-loss writes the CSV with normalized first-row losses.
    let out = run_in(
        dir.path(),
        &[
            "profile-loss", "--checkpoint", ckpt_s, "--dataset", "data.bin",
            "--out", "profile.csv", "--n-bins", "5", "--samples-per-bin", "4",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let profile = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    let mut lines = profile.lines();
    assert_eq!(lines.next().unwrap(), "t,loss_v,loss_a");
    let first = lines.next().unwrap();
    assert_eq!(first, "1,1,1");
}

#[test]
fn generate_validates_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let cfg_s = cfg.to_str().unwrap();
    run_in(dir.path(), &["make-data", "--config", cfg_s]);
    let out = run_in(dir.path(), &["train", "--config", cfg_s]);
    assert!(out.status.success());

    // Zero samples is a validation error.
    let out = run_in(
        dir.path(),
        &[
            "generate", "--checkpoint", "ckpt/latest.ckpt", "--out-dir", "out",
            "--n-samples", "0",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    // A corrupted version field is an artifact incompatibility (exit 3).
    let mut bytes = std::fs::read(dir.path().join("ckpt/latest.ckpt")).unwrap();
    bytes[4] = 0x7f;
    std::fs::write(dir.path().join("bad.ckpt"), bytes).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "generate", "--checkpoint", "bad.ckpt", "--out-dir", "out",
            "--n-samples", "1",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}
