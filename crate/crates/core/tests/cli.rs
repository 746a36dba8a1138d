use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lang4d::checkpoint::Checkpoint;
use lang4d::config::RunConfig;
use lang4d::pipeline::{grid_mask, Model};
use lang4d::synth::read_bundle;
use lang4d::tensor::lft::{self, LftArray};

fn lang4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lang4d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lang4d")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A bundle plus a zero-epoch checkpoint with a briefly fitted autoencoder.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let bundle = dir.join("data");
    assert!(lang4d(&["gen-synth", "--seed", "1", "--out", s(&bundle)]).status.success());
    let config = dir.join("cfg.json");
    fs::write(&config, r#"{"pretrain": null, "autoencoder": {"epochs": 2}}"#).unwrap();
    let run = dir.join("run");
    let out = lang4d(&[
        "train", "--config", s(&config), "--bundle", s(&bundle), "--out", s(&run), "--epochs", "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (bundle, run.join("checkpoint.l4ck"))
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        assert!(lang4d(&["gen-synth", "--seed", seed, "--out", s(p)]).status.success());
    }
    let (fa, fb, fc) = (files(&a), files(&b), files(&c));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(lang4d(&["--help"]).status.code(), Some(0));
    assert_eq!(lang4d(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lang4d(&["eval", "--bundle", "x"]).status.code(), Some(2));

    let out = lang4d(&["eval", "--bundle", "/nonexistent/bundle", "--checkpoint", "/nonexistent/ck.l4ck"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert!(v["error"].is_string());
    assert!(v["message"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn zero_epoch_training_keeps_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let run = ck.parent().unwrap();
    assert!(run.join("config.json").exists());
    assert!(run.join("train_log.ndjson").exists());

    let ck = Checkpoint::load(&ck).unwrap();
    let cfg: RunConfig = ck.config.clone();
    let (model, _) = ck.to_model(Some(&cfg)).unwrap();
    let init = Model::new(cfg.encoder.clone(), cfg.sbd.clone(), cfg.train.seed).unwrap();
    assert_eq!(model.encoder.params.digest(), init.encoder.params.digest());
    assert_eq!(model.sbd.params.digest(), init.sbd.params.digest());
}

#[test]
fn query_infer_and_eval_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, ck) = trained(dir.path());
    let scenes = read_bundle(&bundle).unwrap();
    let scene = &scenes[0];
    let q = &scene.queries[0];

    let qdir = dir.path().join("q");
    let out = lang4d(&[
        "query", "--checkpoint", s(&ck), "--bundle", s(&bundle), "--scene", scene.name(), "--query", &q.name,
        "--out", s(&qdir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let n = scene.frames.len();
    for t in 0..n {
        assert!(qdir.join(format!("query_{}_f{t}.ply", q.name)).exists());
        assert!(qdir.join(format!("mask_{}_f{t}.lft", q.name)).exists());
    }
    assert!(qdir.join(format!("segment_{}.txt", q.name)).exists());

    let idir = dir.path().join("infer");
    let out = lang4d(&["infer", "--checkpoint", s(&ck), "--bundle", s(&bundle), "--scene", scene.name(), "--out", s(&idir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(idir.join("semantic_agnostic_f000.lft").exists());
    assert!(idir.join(format!("depth_f{:03}.lft", n - 1)).exists());
    assert!(idir.join("camera_f000.txt").exists());

    // Ground-truth masks written as predictions must score perfectly.
    let pdir = dir.path().join("pred");
    let patch = 8;
    for sc in &scenes {
        let sdir = pdir.join(sc.name());
        fs::create_dir_all(&sdir).unwrap();
        let g = sc.spec.resolution / patch;
        for q in &sc.queries {
            for (t, f) in sc.frames.iter().enumerate() {
                let m = grid_mask(&q.gt_mask(&f.ids, t), sc.spec.resolution, patch).unwrap();
                let m = m.into_iter().map(u16::from).collect();
                lft::write(&sdir.join(format!("mask_{}_f{t}.lft", q.name)), &LftArray::u16(&[g, g], m)).unwrap();
            }
            let seg: Vec<String> = q.segment.iter().map(usize::to_string).collect();
            fs::write(sdir.join(format!("segment_{}.txt", q.name)), seg.join(" ")).unwrap();
        }
    }
    let report = dir.path().join("report.json");
    for branch in ["agnostic", "sensitive"] {
        let out = lang4d(&[
            "eval", "--bundle", s(&bundle), "--predictions", s(&pdir), "--branch", branch, "--all-frames", "--out",
            s(&report),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["miou"].as_f64(), Some(1.0), "{branch}");
        assert_eq!(v["acc"].as_f64(), Some(1.0), "{branch}");
        assert_eq!(v["viou"].as_f64(), Some(1.0), "{branch}");
    }
}
