use std::path::Path;
use std::process::{Command, Output};

fn maskbit(dir: &Path, args: &[&str]) -> Output {
    let out = format!("output_dir={}", dir.display());
    Command::new(env!("CARGO_BIN_EXE_maskbit"))
        .args(args)
        .args(["--preset", "toy", "--set", "data.per_class=3", "--set", &out])
        .output()
        .expect("failed to launch maskbit")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = maskbit(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn trained(dir: &Path) {
    ok(dir, &["train-stage1", "--iters", "3"]);
    ok(dir, &["tokenize"]);
    ok(dir, &["train-stage2", "--iters", "3"]);
}

#[test]
fn sampling_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let a = dir.join("a");
    let b = dir.join("b");
    ok(dir, &["sample", "--classes", "0,3", "--per-class", "2", "--out", a.to_str().unwrap()]);
    ok(dir, &["sample", "--classes", "0,3", "--per-class", "2", "--out", b.to_str().unwrap()]);
    for name in ["grid.png", "samples.tokens", "sample-0000-class0.png", "sample-0003-class3.png"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs between runs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dir.join("manifest-sample.json"))).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["content_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn token_width_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["train-stage1", "--iters", "1"]);
    ok(dir, &["tokenize"]);
    let o = maskbit(dir, &["train-stage2", "--iters", "1", "--set", "generator.bits=12"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("generator.bits") && err.contains("expected 8, found 12"), "{err}");
    assert!(!dir.join("stage2.ckpt").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let once = tmp.path().join("once");
    let twice = tmp.path().join("twice");
    ok(&once, &["train-stage1", "--iters", "4"]);
    ok(&twice, &["train-stage1", "--iters", "2"]);
    ok(&twice, &["train-stage1", "--iters", "2", "--resume"]);
    assert_eq!(read(&once.join("stage1.ckpt")), read(&twice.join("stage1.ckpt")));
}

#[test]
fn resume_rejects_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["train-stage1", "--iters", "1"]);
    let o = maskbit(dir, &["train-stage1", "--iters", "1", "--resume", "--set", "losses.recon=2.0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("losses.recon"));
}

#[test]
fn bad_overrides_and_missing_files_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = maskbit(dir, &["show-config", "--set", "losses.nope=1"]);
    assert_eq!(o.status.code(), Some(4));
    let o = maskbit(dir, &["tokenize"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1.ckpt"));
}

#[test]
fn printed_config_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = ok(dir, &["show-config"]);
    let path = dir.join("cfg.toml");
    std::fs::write(&path, &o.stdout).unwrap();
    let o2 = Command::new(env!("CARGO_BIN_EXE_maskbit"))
        .args(["show-config", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o2.status.success());
    assert_eq!(o.stdout, o2.stdout);
}

#[test]
fn analyses_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    ok(dir, &["eval-recon", "--limit", "6"]);
    ok(dir, &["analyze-bitflip", "--index", "1"]);
    ok(dir, &["analyze-nn", "--queries", "3", "--k", "2"]);
    let o = ok(dir, &["roadmap", "--iters", "1", "--eval-images", "4", "--rungs", "baseline,embedding_free"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("baseline") && table.contains("embedding_free"), "{table}");
    assert!(dir.join("bitflip-1.png").exists());
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    for m in ["rfid_proxy", "bitflip_mse_bit7", "nn_overlap", "roadmap.baseline.rfid_proxy"] {
        assert!(metrics.contains(&format!("\"{m}\"")), "missing {m}");
    }
}
