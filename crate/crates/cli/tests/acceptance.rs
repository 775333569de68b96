//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use causal_tune::adapter::{causal_tune, refine, AdapterParams, AdapterShape};
use causal_tune::config::RunConfig;
use causal_tune::experiment::{gradcheck_suite, median, PIPELINE_TOLERANCE, REFINE_TOLERANCE};
use causal_tune::filtering::{band_pass_gain, split, BandPassFilter, FilterMode};
use causal_tune::image::LabelMap;
use causal_tune::spectral::{inverse, transform, Backend, FeatureMap};
use causal_tune::synthbench::miou;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_causal-tune"))
}

/// Runs the binary, returning an error with its diagnostics on a nonzero
/// exit.
fn run(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`causal-tune {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let f = random_map(64, 64, 8, 1);
    let spectrum = transform(&f, Backend::Dct).map_err(|e| e.to_string())?;
    let back = inverse(&spectrum).map_err(|e| e.to_string())?;
    let roundtrip = back.max_abs_diff(&f);
    let parseval = (spectrum.norm_sq() - f.norm_sq()).abs() / f.norm_sq();
    let g = random_map(8, 8, 1, 2);
    let gs = transform(&g, Backend::Dct).map_err(|e| e.to_string())?;
    let alpha = |k: usize| {
        if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        }
    };
    let mut literal: f64 = 0.0;
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                for y in 0..8 {
                    acc += g.get(x, y, 0)
                        * (PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos()
                        * (PI * (2 * y + 1) as f64 * v as f64 / 16.0).cos();
                }
            }
            literal = literal.max((alpha(u) * alpha(v) * acc - gs.get(u, v, 0)).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(roundtrip <= 1e-9, format!("roundtrip error {roundtrip:e}"))?;
    ensure(parseval <= 1e-9, format!("Parseval error {parseval:e}"))?;
    ensure(literal <= 1e-10, format!("separable vs literal {literal:e}"))?;
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "roundtrip {roundtrip:.2e}, Parseval {parseval:.2e}, literal {literal:.2e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let filt =
        BandPassFilter::for_backend(Backend::Dct, 0.2, 0.7, 16, 16, FilterMode::BandPass).map_err(|e| e.to_string())?;
    ensure(filt.at(0, 0) == 0.0, format!("G(0,0) = {:e}", filt.at(0, 0)))?;
    ensure(
        filt.gain().iter().all(|&g| (0.0..1.0).contains(&g)),
        "gain outside [0, 1)",
    )?;
    let spectrum = transform(&random_map(16, 16, 4, 3), Backend::Dct).map_err(|e| e.to_string())?;
    let parts = split(&spectrum, &filt).map_err(|e| e.to_string())?;
    let residual: f64 = parts
        .causal
        .data()
        .iter()
        .zip(parts.noncausal.data())
        .zip(spectrum.data())
        .map(|((a, b), x)| (a + b - x).powi(2))
        .sum();
    let rel = (residual / spectrum.norm_sq()).sqrt();
    ensure(rel <= 1e-12, format!("split reconstruction {rel:e}"))?;
    let direct = (-0.25f64 / (2.0 * 0.7 * 0.7)).exp() - (-0.25f64 / (2.0 * 0.2 * 0.2)).exp();
    let at_half = (band_pass_gain(0.5, 0.2, 0.7) - direct).abs();
    ensure(at_half <= 1e-12, format!("gain at 0.5 off by {at_half:e}"))?;
    Ok(format!(
        "G(0,0)=0, gain in [0,1), split {rel:.2e}, gain(0.5) {at_half:.1e}"
    ))
}

fn criterion_3() -> Outcome {
    let shape = AdapterShape {
        tokens: 16,
        rank: 4,
        channels: 8,
        mlp_depth: 1,
    };
    let params = AdapterParams::init(shape, &[true], 0).map_err(|e| e.to_string())?;
    let f = random_map(8, 8, 8, 4);
    let mut worst_sum: f64 = 0.0;
    let mut worst_fresh: f64 = 0.0;
    let mut worst_offset: f64 = 0.0;
    let mut trained = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for l in &mut trained.layers[0].as_mut().unwrap().mlp2.layers {
        for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let shifted = FeatureMap::from_fn(8, 8, 8, |h, w, c| f.get(h, w, c) + 4.0 - 0.5 * c as f64).unwrap();
    for backend in Backend::ALL {
        let filt =
            BandPassFilter::for_backend(backend, 0.2, 0.7, 8, 8, FilterMode::BandPass).map_err(|e| e.to_string())?;
        let spectrum = transform(&f, backend).map_err(|e| e.to_string())?;
        let causal = split(&spectrum, &filt).map_err(|e| e.to_string())?.causal;
        let trace = refine(&causal, &params, 0).map_err(|e| e.to_string())?;
        for r in 0..trace.attention.rows() {
            worst_sum = worst_sum.max((trace.attention.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let delta = causal_tune(&f, &params, &filt, 0).map_err(|e| e.to_string())?;
        let band = inverse(&causal).map_err(|e| e.to_string())?;
        worst_fresh = worst_fresh.max(delta.max_abs_diff(&band));
        let a = causal_tune(&f, &trained, &filt, 0).map_err(|e| e.to_string())?;
        let b = causal_tune(&shifted, &trained, &filt, 0).map_err(|e| e.to_string())?;
        worst_offset = worst_offset.max(a.max_abs_diff(&b));
    }
    ensure(worst_sum <= 1e-12, format!("softmax row sum off by {worst_sum:e}"))?;
    ensure(worst_fresh <= 1e-9, format!("fresh adapter differs by {worst_fresh:e}"))?;
    ensure(
        worst_offset <= 1e-9,
        format!("offset changes delta by {worst_offset:e}"),
    )?;
    Ok(format!(
        "row sums {worst_sum:.1e}, zero MLP2 vs band-pass {worst_fresh:.1e}, offset {worst_offset:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let suite = gradcheck_suite(&RunConfig::default(), 0).map_err(|e| e.to_string())?;
    let cli = bin().arg("gradcheck").output().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for e in &suite.entries {
        ensure(e.passed(), e.to_string())?;
    }
    for suite_name in ["refine", "pipeline"] {
        for class in ["A", "B", "mlp1", "mlp2"] {
            ensure(
                suite
                    .entries
                    .iter()
                    .any(|e| e.suite == suite_name && e.tensor.contains(class) && e.report.coordinates_checked > 0),
                format!("{suite_name} suite never checks {class}"),
            )?;
        }
    }
    ensure(
        suite
            .entries
            .iter()
            .any(|e| e.suite == "pipeline" && e.tensor.starts_with("head")),
        "pipeline suite never checks the head",
    )?;
    ensure(
        cli.status.success(),
        format!("gradcheck exited with {:?}", cli.status.code()),
    )?;
    within(elapsed, Duration::from_secs(60))?;
    let (r, p) = (suite.max_error("refine"), suite.max_error("pipeline"));
    ensure(r <= REFINE_TOLERANCE && p <= PIPELINE_TOLERANCE, "tolerance breach")?;
    Ok(format!(
        "refine max rel {r:.2e} over {} coords, pipeline max rel {p:.2e} over {} coords, {:.1}s",
        suite.coordinates("refine"),
        suite.coordinates("pipeline"),
        elapsed.as_secs_f64()
    ))
}

fn summary_value(text: &str, key: &str) -> Result<String, String> {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .map(str::to_string)
        .ok_or_else(|| format!("summary lacks {key}"))
}

fn criterion_5(dir: &Path) -> Outcome {
    let start = Instant::now();
    let out = dir.join("c5");
    run(&["train", "--outdir", s(&out)])?;
    let elapsed = start.elapsed();
    let summary = String::from_utf8(read(&out.join("summary.txt"))?).map_err(|e| e.to_string())?;
    let reduction: f64 = summary_value(&summary, "loss_reduction")?
        .parse()
        .map_err(|e| format!("{e}"))?;
    let before = summary_value(&summary, "backbone_hash_before")?;
    let after = summary_value(&summary, "backbone_hash_after")?;
    let curve = String::from_utf8(read(&out.join("loss.csv"))?).map_err(|e| e.to_string())?;
    ensure(curve.lines().count() == 301, "loss curve does not have 300 steps")?;
    ensure(before == after, "backbone hash changed")?;
    ensure(
        reduction >= 0.5,
        format!("loss reduced by only {:.1}%", 100.0 * reduction),
    )?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "loss reduced {:.1}% over 300 steps, backbone hash unchanged, {:.0}s",
        100.0 * reduction,
        elapsed.as_secs_f64()
    ))
}

fn criterion_6(dir: &Path) -> Outcome {
    let csv = dir.join("trend.csv");
    run(&["trend", "--seeds", "5", "--out", s(&csv)])?;
    let text = String::from_utf8(read(&csv)?).map_err(|e| e.to_string())?;
    let mut adapter = Vec::new();
    let mut baseline = Vec::new();
    let mut per_seed = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let a: f64 = cols[1].parse().map_err(|e| format!("{e}"))?;
        let b: f64 = cols[2].parse().map_err(|e| format!("{e}"))?;
        per_seed.push(format!("seed {}: {a:.4} vs {b:.4}", cols[0]));
        adapter.push(a);
        baseline.push(b);
    }
    ensure(adapter.len() == 5, "expected five seeds")?;
    let (ma, mb) = (median(&adapter), median(&baseline));
    let detail = format!("median adapter {ma:.4} vs baseline {mb:.4} [{}]", per_seed.join("; "));
    if ma >= mb {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn csv_rows(p: &Path) -> Result<usize, String> {
    Ok(String::from_utf8_lossy(&read(p)?).lines().count().saturating_sub(1))
}

fn criterion_7(dir: &Path) -> Outcome {
    let start = Instant::now();
    let a = dir.join("ablate_a.csv");
    let b = dir.join("ablate_b.csv");
    run(&["ablate", "--out", s(&a)])?;
    run(&["ablate", "--out", s(&b)])?;
    let rows = csv_rows(&a)?;
    ensure(rows == 12, format!("ablation has {rows} rows"))?;
    let text = String::from_utf8_lossy(&read(&a)?).into_owned();
    for mode in ["identity", "remove-low-only", "remove-high-only", "band-pass"] {
        for backend in ["dct", "fft", "haar"] {
            ensure(
                text.lines().any(|l| l.starts_with(&format!("{mode},{backend},"))),
                format!("missing cell {mode}/{backend}"),
            )?;
        }
    }
    ensure(read(&a)? == read(&b)?, "ablation reruns differ")?;
    let sweep = dir.join("sweep.csv");
    run(&[
        "sweep",
        "--rl-grid",
        "0.1,0.2,0.3",
        "--rh-grid",
        "0.6,0.7,0.8",
        "--out",
        s(&sweep),
    ])?;
    let sweep_rows = csv_rows(&sweep)?;
    ensure(sweep_rows == 9, format!("sweep has {sweep_rows} rows"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(45 * 60))?;
    Ok(format!(
        "ablation 12 rows byte-identical across reruns, sweep 9 rows, {:.0}s",
        elapsed.as_secs_f64()
    ))
}

fn brute_force(pred: &[u8], gt: &[u8], k: u8) -> f64 {
    let mut ious = Vec::new();
    for class in 0..k {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            inter += usize::from(p == class && g == class);
            union += usize::from(p == class || g == class);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k: u8 = rng.random_range(2..=6);
        let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let gt: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let want = brute_force(&pred, &gt, k);
        let got = miou(
            &LabelMap::new(h, w, pred).unwrap(),
            &LabelMap::new(h, w, gt).unwrap(),
            k as usize,
        )
        .map_err(|e| e.to_string())?
        .miou;
        ensure(got == want, format!("case {case}: {got} vs brute force {want}"))?;
    }
    Ok("100 random instances up to 8x8 match pixel counting exactly".into())
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 20;
    cfg.train.scenes = 16;
    cfg.eval.scenes = 6;
    let config = dir.join("small.toml");
    fs::write(&config, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let c = s(&config);
    let mut files: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.join(format!("det{i}"))).collect();
    for r in &runs {
        let train = r.join("train");
        run(&["train", "--config", c, "--outdir", s(&train)])?;
        run(&[
            "eval",
            "--config",
            c,
            "--checkpoint",
            s(&train.join("checkpoint.cten")),
            "--outdir",
            s(&r.join("eval")),
        ])?;
        run(&[
            "decompose",
            "--scene",
            "7",
            "--corruption",
            "fog",
            "--outdir",
            s(&r.join("dec")),
        ])?;
        run(&[
            "sweep",
            "--config",
            c,
            "--rl-grid",
            "0.1,0.2",
            "--rh-grid",
            "0.7",
            "--out",
            s(&r.join("sweep.csv")),
        ])?;
        run(&[
            "ablate",
            "--config",
            c,
            "--filter-modes",
            "identity,band-pass",
            "--backends",
            "dct,haar",
            "--out",
            s(&r.join("ablate.csv")),
        ])?;
        run(&["trend", "--config", c, "--seeds", "2", "--out", s(&r.join("trend.csv"))])?;
    }
    for rel in [
        "train/loss.csv",
        "train/checkpoint.cten",
        "eval/class_iou.csv",
        "eval/miou.csv",
        "dec/gain.csv",
        "dec/causal.cten",
        "sweep.csv",
        "ablate.csv",
        "trend.csv",
    ] {
        files.push((rel.to_string(), runs[0].join(rel), runs[1].join(rel)));
    }
    for (name, a, b) in &files {
        ensure(read(a)? == read(b)?, format!("{name} differs between reruns"))?;
    }
    Ok(format!(
        "{} outputs of train, eval, decompose, sweep, ablate, trend byte-identical",
        files.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("transform correctness", Box::new(criterion_1)),
        ("filter algebra", Box::new(criterion_2)),
        ("adapter structure", Box::new(criterion_3)),
        ("gradient suite", Box::new(criterion_4)),
        ("training sanity", Box::new(|| criterion_5(dir))),
        ("generalization trend", Box::new(|| criterion_6(dir))),
        ("ablation harness", Box::new(|| criterion_7(dir))),
        ("mIoU oracle", Box::new(criterion_8)),
        ("determinism", Box::new(|| criterion_9(dir))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
