use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fgmine::runner::read_summary;

const SMALL: &[&str] = &[
    "--n-houses-seen",
    "3",
    "--n-houses-unseen",
    "2",
    "--set",
    "data.n_seen=24",
    "--set",
    "data.n_unseen=8",
];

fn fgmine(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgmine"))
        .args(args)
        .env("FGMINE_RUN_ROOT", root)
        .output()
        .expect("binary runs")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

#[test]
fn missing_required_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fgmine(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn invalid_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = fgmine(&["gen-data", "--out", "d", "--n-houses-unseen", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_houses_unseen"));

    let out = fgmine(&["print-config", "--set", "train.lr=fast"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));

    let out = fgmine(&["print-config", "--sync", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sync"));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = fgmine(&with_small(&["gen-data", "--out", name, "--seed", "7"]), dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["world.json", "data_seen.jsonl", "data_unseen.jsonl"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
    let out = fgmine(&with_small(&["gen-data", "--out", "c", "--seed", "8"]), dir.path());
    assert!(out.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/data_seen.jsonl")).unwrap(),
        fs::read(dir.path().join("c/data_seen.jsonl")).unwrap()
    );
}

#[test]
fn print_config_round_trips_through_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = fgmine(&["print-config", "--preset", "baseline", "--lr", "0.05", "--sync", "inf"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train.n_fgn=0\n"));
    assert!(text.contains("train.lr=0.05\n"));
    assert!(text.contains("train.sync=inf\n"));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, &text).unwrap();
    let again = fgmine(&["print-config", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn train_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let gen = fgmine(&with_small(&["gen-data", "--out", "data"]), dir.path());
    assert!(gen.status.success());
    let data = dir.path().join("data");
    let out = fgmine(
        &[
            "train",
            "--out",
            "run",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "2",
            "--iters",
            "3",
            "--dump-bo",
            "--dump-negatives",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let summary = read_summary(&run.join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|r| r.status == "ok"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(manifest["metadata"]["status"], "ok");
    assert_eq!(manifest["config"]["data"]["n_seen"], 24);
    // 24 single-episode steps per epoch, 3 trials each
    assert_eq!(fs::read_to_string(run.join("bo_trials.jsonl")).unwrap().lines().count(), 2 * 24 * 3);
    assert_eq!(fs::read_to_string(run.join("negatives.jsonl")).unwrap().lines().count(), 2 * 24);
    assert!(run.join("ckpt_24.bin").exists() && run.join("ckpt_48.bin").exists());

    let analysis = fgmine(
        &[
            "embed-analysis",
            "--out",
            "emb",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            run.join("ckpt_48.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(analysis.status.success(), "{}", String::from_utf8_lossy(&analysis.stderr));
    let dist = fs::read_to_string(dir.path().join("emb/dist_report.csv")).unwrap();
    assert_eq!(dist.lines().next().unwrap(), "style,mu,sigma,n");
    assert_eq!(dist.lines().count(), 4);
    // header, then a positive and one negative per style for each unseen episode
    let proj = fs::read_to_string(dir.path().join("emb/proj.csv")).unwrap();
    assert_eq!(proj.lines().count(), 1 + 8 * 4);
}

#[test]
fn checkpoint_from_another_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = fgmine(&with_small(&["train", "--out", "run", "--epochs", "1", "--preset", "baseline"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("run/ckpt_24.bin");
    let mut args = with_small(&["embed-analysis", "--out", "emb", "--checkpoint", ckpt.to_str().unwrap()]);
    args.extend(["--set", "encoder.hidden_dim=5"]);
    let out = fgmine(&args, dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load error"));
}
