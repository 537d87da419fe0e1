use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pier_core::harness::{read_params, StoredParams};

const TINY: &[&str] = &[
    "vocab_size=128",
    "embed_dim=8",
    "num_layers=1",
    "num_heads=2",
    "seq_len=8",
    "global_batch=8",
    "val_batches=1",
    "total_iters=60",
    "sync_interval=6",
    "train_len=5000",
    "val_len=1000",
];

fn pier(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pier"));
    cmd.args(args);
    for s in TINY.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let res = pier(&["train", "--out", &out, "--seed", "3"], &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let traj = fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    let mut lines = traj.lines();
    let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(head["kind"], "header");
    assert_eq!(head["config"]["seed"], 3);
    assert_eq!(head["config"]["total_iters"], 60);
    assert!(head["code_version"].as_str().unwrap().starts_with("pier-core"));
    let records: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 60);
    let first = traj.lines().nth(1).unwrap();
    let loss = first.split("\"train_loss\":").nth(1).unwrap().split(',').next().unwrap();
    assert_eq!(loss.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count(), 17, "{loss}");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_val_loss"].as_f64().unwrap() < summary["initial_val_loss"].as_f64().unwrap());
    let digest = summary["params_digest"].as_str().unwrap();
    match read_params(&dir.path().join("params.bin")).unwrap() {
        StoredParams::Double(p) => assert_eq!(p.digest(), digest),
        StoredParams::Single(_) => panic!("expected double precision"),
    }
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("timing.json").exists());
}

#[test]
fn reruns_are_byte_identical_across_worker_modes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pier(&["train", "--out", &out_arg(a.path()), "--workers-mode", "seq"], &[]);
    let rb = pier(&["train", "--out", &out_arg(b.path()), "--workers-mode", "par"], &[]);
    assert!(ra.status.success() && rb.status.success());
    for f in ["summary.json", "params.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // The header records the worker mode, so compare records only.
    let body = |d: &Path| {
        let t = fs::read_to_string(d.join("trajectory.jsonl")).unwrap();
        t.lines().skip(1).map(String::from).collect::<Vec<_>>()
    };
    assert_eq!(body(a.path()), body(b.path()));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let res = pier(&["train", "--out", &out_arg(dir.path())], &["sync_interval=7"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sync_interval"));

    let res = pier(&["train", "--out", &out_arg(dir.path())], &["no_such_key=1"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no_such_key"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "groups = 0\n").unwrap();
    let res = pier(&["train", "--config", cfg.to_str().unwrap(), "--out", &out_arg(dir.path())], &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let res = pier(
        &["train", "--out", &out_arg(dir.path())],
        &["inner_lr_peak=1e300", "inner_lr_min=1e300", "clip_norm=1e308"],
    );
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = pier(&["gradcheck", "--out", &out_arg(dir.path())], &["gradcheck_coords=16"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = pier(
        &["gradcheck", "--out", &out_arg(dir.path())],
        &["gradcheck_coords=16", "gradcheck_corrupt=0.01"],
    );
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn project_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let res = pier(
        &["project", "--out", &out_arg(dir.path())],
        &["total_iters=1000", "sync_interval=50", "gpus=[8,16]", "intervals=[50,100]"],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.lines().count(), 5);
    let lines = fs::read_to_string(dir.path().join("projection.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
}

#[test]
fn compare_runs_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let res = pier(&["compare", "--out", &out_arg(dir.path())], &["seeds=[0,1]"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for seed in ["seed0", "seed1"] {
        for mode in ["adamw_baseline", "diloco_baseline", "pier"] {
            assert!(dir.path().join(seed).join(mode).join("params.bin").exists());
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    assert!(report["projected_speedup"].as_f64().unwrap() > 0.0);
}
