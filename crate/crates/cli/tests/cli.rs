use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use causal_tune::config::RunConfig;
use causal_tune::cten;
use causal_tune::experiment::{build_model, params_from_cten};

fn causal_tune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causal-tune"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 2;
    cfg.train.scenes = 4;
    cfg.eval.scenes = 2;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    p(&path).to_string()
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let out = causal_tune(&["train", "--config", p(&cfg), "--outdir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_and_malformed_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = causal_tune(&["decompose", "--input", "/no/such/file.ppm", "--outdir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    let bad = dir.path().join("bad.cten");
    fs::write(&bad, b"CTEN\x01\x00\x05\x00\x00\x00").unwrap();
    let out = causal_tune(&["decompose", "--input", p(&bad), "--outdir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn inverted_cutoffs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = causal_tune(&[
        "decompose",
        "--scene",
        "1",
        "--rl",
        "0.7",
        "--rh",
        "0.2",
        "--outdir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decompose_writes_all_outputs_and_defaults_cutoffs() {
    let dir = tempfile::tempdir().unwrap();
    let out = causal_tune(&[
        "decompose",
        "--scene",
        "2",
        "--corruption",
        "rain",
        "--outdir",
        p(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["causal.cten", "noncausal.cten", "gain.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(
        summary.contains("rl=0.2\n") && summary.contains("rh=0.7\n"),
        "{summary}"
    );
    let causal = cten::read_file(&dir.path().join("causal.cten")).unwrap();
    assert_eq!(causal[0].dims, vec![64, 64, 3]);
}

#[test]
fn identity_decomposition_of_cten_input_returns_it() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    assert!(causal_tune(&["decompose", "--scene", "4", "--outdir", p(&base)])
        .status
        .success());
    let input = base.join("causal.cten");
    let out_dir = dir.path().join("id");
    let out = causal_tune(&[
        "decompose",
        "--input",
        p(&input),
        "--mode",
        "identity",
        "--outdir",
        p(&out_dir),
    ]);
    assert!(out.status.success());
    let a = &cten::read_file(&input).unwrap()[0];
    let b = &cten::read_file(&out_dir.join("causal.cten")).unwrap()[0];
    let worst = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9);
}

#[test]
fn train_with_zero_steps_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = causal_tune(&["train", "--config", &cfg, "--steps", "0", "--outdir", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = params_from_cten(&cten::read_file(&dir.path().join("checkpoint.cten")).unwrap()).unwrap();
    let init = build_model(&RunConfig::load(Path::new(&cfg)).unwrap()).unwrap();
    assert_eq!(saved, init.params);
}

#[test]
fn sweep_skips_invalid_pairs_and_rejects_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let csv = dir.path().join("sweep.csv");
    let out = causal_tune(&[
        "sweep",
        "--config",
        &cfg,
        "--rl-grid",
        "0.2,0.7",
        "--rh-grid",
        "0.2,0.7",
        "--out",
        p(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("rl,rh,avg_miou,"));
    assert_eq!(text.lines().count(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping"));
    let out = causal_tune(&[
        "sweep",
        "--config",
        &cfg,
        "--rl-grid",
        "0.9",
        "--rh-grid",
        "0.2",
        "--out",
        p(&csv),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_writes_report_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(causal_tune(&["train", "--config", &cfg, "--outdir", p(dir.path())])
        .status
        .success());
    let ckpt = dir.path().join("checkpoint.cten");
    let out = causal_tune(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        p(&ckpt),
        "--outdir",
        p(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let miou = fs::read_to_string(dir.path().join("miou.csv")).unwrap();
    assert!(miou.starts_with("domain,miou\nclean,"));
    assert_eq!(miou.lines().count(), 6);
    let classes = fs::read_to_string(dir.path().join("class_iou.csv")).unwrap();
    assert_eq!(classes.lines().next(), Some("domain,class,iou"));
}
