use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn msarnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msarnn"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MSA_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = r#"{
  "batch": 1,
  "model": {
    "msa": {"n_points": 2, "stage_channels": [3, 3, 3]},
    "policy": {"n_points": 2, "hidden_points": 4, "hidden_joint": 4, "hidden_high": 4}
  }
}"#;

/// Four 8x8 episodes and a three-step tiny model under `dir`.
fn tiny_run(dir: &Path, jobs: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    let o = msarnn(
        &[
            "--jobs",
            jobs,
            "gen-data",
            "--episodes",
            "4",
            "--image-size",
            "8",
            "--distance",
            "0.3",
            "--out",
            "data",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = msarnn(
        &[
            "--jobs",
            jobs,
            "train",
            "--data",
            "data",
            "--config",
            "tiny.json",
            "--steps",
            "3",
            "--out",
            "run",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (dir.join("data"), dir.join("run"))
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = msarnn(&["gen-data", "--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--episodes",
        "--seed",
        "--distance",
        "--image-size",
        "--out",
        "[default: 54]",
        "[default: 7]",
    ] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
    let o = msarnn(&["train", "--help"], dir.path());
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--data",
        "--out",
        "--ablation-backbone",
        "--ablation-input",
        "msa",
        "mono",
    ] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
    let o = msarnn(&["eval", "--help"], dir.path());
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--ckpt", "--trials", "--condition", "--distance", "--seed", "--out"] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&msarnn(&["gen-data", "--bogus"], p)), 1);
    assert_eq!(code(&msarnn(&["eval", "--ckpt", "x.bin", "--condition", "fog"], p)), 1);
    assert_eq!(code(&msarnn(&["gen-data", "--distance", "9", "--out", "d"], p)), 1);
    assert_eq!(code(&msarnn(&["--jobs", "0", "grad-check"], p)), 1);
    fs::write(p.join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    assert_eq!(code(&msarnn(&["train", "--config", "bad.json"], p)), 1);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = msarnn(&["eval", "--ckpt", "nowhere.bin", "--out", "e"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    let record = json(&dir.path().join("e/run.json"));
    assert_eq!(record["exit_code"], 2);
}

#[test]
fn pipeline_writes_artifacts_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let (data, run) = tiny_run(p, "1");
    let summary = json(&data.join("dataset.json"));
    assert_eq!(summary["episodes"].as_array().unwrap().len(), 4);
    assert!(data.join("episode_0003/left.f32").exists());
    let record = json(&data.join("run.json"));
    assert_eq!(record["exit_code"], 0);
    assert_eq!(record["args"]["command"]["GenData"]["episodes"], 4);
    assert!(record["version"]
        .as_str()
        .unwrap()
        .starts_with(env!("CARGO_PKG_VERSION")));
    assert!(record["started_at"].is_string() && record["finished_at"].is_string());

    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let ckpt = run.join("ckpt_3.bin");
    assert!(ckpt.exists() && run.join("ckpt_3.manifest.json").exists());

    let o = msarnn(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--trials",
            "3",
            "--condition",
            "none",
            "--out",
            "e",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&p.join("e/eval_report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["trials"], 3);
    assert_eq!(rows[0]["latency_ms"]["mean"], 0.0);
    assert!(
        json(&p.join("e/eval_timing.json"))[0]["latency_ms"]["mean"]
            .as_f64()
            .unwrap()
            > 0.0
    );

    let o = msarnn(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--trials",
            "2",
            "--out",
            "all",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        json(&p.join("all/eval_report.json"))["rows"].as_array().unwrap().len(),
        4
    );

    let o = msarnn(
        &[
            "rollout",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--seed",
            "4",
            "--export-attention",
            "--out",
            "r",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(p.join("r/rollout_4.csv")).unwrap().lines().count(),
        61
    );
    let step = p.join("r/attention/step_000");
    for f in ["overlay_left.ppm", "overlay_right.ppm", "fused_c0.pgm", "stage1_c1.pgm"] {
        assert!(step.join(f).exists(), "missing {f}");
    }

    let o = msarnn(
        &[
            "analyze",
            "pca",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--per-variant",
            "2",
            "--out",
            "pca",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("pca/pca.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "trace_id,variant,step,pc1,pc2");
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 59);
}

#[test]
fn reruns_are_byte_identical_across_thread_caps() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_run(a.path(), "1");
    tiny_run(b.path(), "3");
    for rel in [
        "data/dataset.json",
        "data/episode_0002/right.f32",
        "data/episode_0001/manifest.json",
        "run/training_log.csv",
        "run/ckpt_3.bin",
        "run/ckpt_3.manifest.json",
        "run/train.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = msarnn(&["grad-check", "--seeds", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = json(&dir.path().join("grad-check/grad_check.json"));
    assert_eq!(out["passed"], true);
    assert!(out["checks"].as_array().unwrap().len() > 30);
}
