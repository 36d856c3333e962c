use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semloc_core::geometry::Vec3;
use semloc_core::sim::{ArrayGeometry, Scenario, UeGrid};
use sha2::{Digest, Sha256};

fn semloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semloc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = semloc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn digest(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|f| {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            (name, format!("{:x}", Sha256::digest(fs::read(f).unwrap())))
        })
        .collect()
}

fn small_scenario(dir: &Path) -> PathBuf {
    let mut s = Scenario::desk();
    s.array = ArrayGeometry::new(4, 4);
    s.n_subcarriers = 16;
    s.ue_grid = UeGrid::Rect { origin: Vec3::new(14.0, 27.9, 1.5), spacing: 3.2, nx: 10, ny: 2 };
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    path
}

#[test]
fn gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path());
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(&["gen", "--scenario", p(&scenario), "--scenes", "3", "--seed", seed, "--out", p(&out)]);
        digest(&out)
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a, run("c", "8"));
    assert!(a.iter().any(|(n, _)| n == "manifest.json"));
    assert!(!a.iter().any(|(n, _)| n == ".lock"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(semloc(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(semloc(&["train"]).status.code(), Some(2));
    assert_eq!(semloc(&["gradcheck", "--method", "sgd"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = semloc(&["eval", "--ckpt", p(&tmp.path().join("missing")), "--data", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--method", "hda", "--seed", "1"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn locked_output_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let scenario = small_scenario(tmp.path());
    let r = semloc(&["gen", "--scenario", p(&scenario), "--scenes", "2", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn train_eval_report_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let scenario = small_scenario(t);
    let (ds, feats, run, rep) = (t.join("ds"), t.join("fs"), t.join("run"), t.join("report"));
    ok(&["gen", "--scenario", p(&scenario), "--scenes", "10", "--seed", "2", "--out", p(&ds)]);
    ok(&["features", "--in", p(&ds), "--out", p(&feats)]);
    let cfg = t.join("train.json");
    fs::write(
        &cfg,
        r#"{"method": "hda", "epochs": 2, "batch_size": 16, "conv_channels": [2, 4], "mlp_hidden": [8]}"#,
    )
    .unwrap();
    ok(&["train", "--data", p(&feats), "--config", p(&cfg), "--seed", "3", "--out", p(&run)]);
    for f in ["config.json", "train_log.csv", "summary.json", "checkpoint/manifest.json", "checkpoint/params.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("kind,epoch,step,L_CR,L_PCP,L_loc,L_global,L_WR,w1,w2,lambda3,lambda4,total,val_rmse,val_acc\n"));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch,")).count(), 2);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 3);
    assert_eq!(echoed["train"]["method"], "hda");

    ok(&["eval", "--ckpt", p(&run), "--data", p(&feats)]);
    ok(&["eval", "--ckpt", p(&run), "--data", p(&feats), "--split", "val"]);
    let val: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval_val.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(val["rmse"], summary["val"]["rmse"]);
    assert!(run.join("eval_test.json").exists());

    ok(&["report", "--run", p(&run), "--out", p(&rep)]);
    let metrics = fs::read_to_string(rep.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,n_samples,rmse,mean_error,accuracy,p50,p67,p90,p95\n"));
    let cdf = fs::read_to_string(rep.join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("split,rank,error_m,cdf\n"));
    let last: Vec<&str> = cdf.lines().filter(|l| l.starts_with("test,")).next_back().unwrap().split(',').collect();
    assert_eq!(last[3].parse::<f64>().unwrap(), 1.0);
    assert!(rep.join("epochs.csv").exists());

    let desc = ok(&["describe", "--ckpt", p(&run)]);
    assert!(!desc.stdout.is_empty());

    let run2 = t.join("run2");
    ok(&["train", "--data", p(&feats), "--config", p(&cfg), "--seed", "3", "--out", p(&run2)]);
    assert_eq!(fs::read(run.join("train_log.csv")).unwrap(), fs::read(run2.join("train_log.csv")).unwrap());
    assert_eq!(digest(&run.join("checkpoint")), digest(&run2.join("checkpoint")));
}
