use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{causal_tune, refine, AdapterParams, AdapterShape};
use crate::autodiff::{AdamW, AdamWConfig, Gradients, NamedTensors, Tape};
use crate::backbone::{BackboneConfig, ToyBackbone};
use crate::cten::{self, CtenTensor};
use crate::error::Result;
use crate::filtering::{band_pass_gain, split, BandPassFilter, FilterMode};
use crate::image::{Image, LabelMap};
use crate::spectral::{inverse, transform, Backend, FeatureMap};
use crate::synthbench::{corrupt, gen_scene, miou, Corruption, CorruptionKind};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).expect("finite")
}

fn check(name: &'static str, value: f64, tol: f64) -> SelfTestResult {
    SelfTestResult {
        name,
        passed: value <= tol,
        detail: format!("{value:.3e} (tol {tol:.0e})"),
    }
}

fn flag(name: &'static str, ok: bool) -> SelfTestResult {
    SelfTestResult {
        name,
        passed: ok,
        detail: String::new(),
    }
}

fn transform_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let f = random_map(16, 16, 4, 1);
    for backend in Backend::ALL {
        let s = transform(&f, backend)?;
        let back = inverse(&s)?;
        out.push(check(
            match backend {
                Backend::Dct => "dct roundtrip",
                Backend::Fft => "fft roundtrip",
                Backend::Haar => "haar roundtrip",
            },
            back.max_abs_diff(&f),
            1e-9,
        ));
        out.push(check(
            match backend {
                Backend::Dct => "dct parseval",
                Backend::Fft => "fft parseval",
                Backend::Haar => "haar parseval",
            },
            (s.norm_sq() - f.norm_sq()).abs() / f.norm_sq(),
            1e-9,
        ));
    }
    // literal double sum on an 8×8 channel
    let g = random_map(8, 8, 1, 2);
    let s = transform(&g, Backend::Dct)?;
    let n: f64 = 8.0;
    let alpha = |k: usize| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
    let mut worst: f64 = 0.0;
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                for y in 0..8 {
                    acc += g.get(x, y, 0)
                        * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos()
                        * (std::f64::consts::PI * (2 * y + 1) as f64 * v as f64 / (2.0 * n)).cos();
                }
            }
            worst = worst.max((alpha(u) * alpha(v) * acc - s.get(u, v, 0)).abs());
        }
    }
    out.push(check("dct separable vs literal", worst, 1e-10));
    Ok(())
}

fn filter_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let filt = BandPassFilter::for_backend(Backend::Dct, 0.2, 0.7, 8, 8, FilterMode::BandPass)?;
    out.push(flag("gain at dc is zero", filt.at(0, 0) == 0.0));
    out.push(flag(
        "gain within [0, 1)",
        filt.gain().iter().all(|&g| (0.0..1.0).contains(&g)),
    ));
    let direct = (-0.25f64 / (2.0 * 0.49)).exp() - (-0.25f64 / (2.0 * 0.04)).exp();
    out.push(check(
        "gain at rho 0.5",
        (band_pass_gain(0.5, 0.2, 0.7) - direct).abs(),
        1e-12,
    ));
    let s = transform(&random_map(8, 8, 3, 3), Backend::Dct)?;
    let parts = split(&s, &filt)?;
    let err = parts
        .causal
        .data()
        .iter()
        .zip(parts.noncausal.data())
        .zip(s.data())
        .map(|((a, b), x)| (a + b - x).powi(2))
        .sum::<f64>()
        .sqrt()
        / s.norm_sq().sqrt();
    out.push(check("split reconstruction", err, 1e-12));
    Ok(())
}

fn adapter_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let shape = AdapterShape {
        tokens: 16,
        rank: 4,
        channels: 8,
        mlp_depth: 1,
    };
    let params = AdapterParams::init(shape, &[true], 5)?;
    let f = random_map(8, 8, 8, 6);
    let filt = BandPassFilter::for_backend(Backend::Dct, 0.2, 0.7, 8, 8, FilterMode::BandPass)?;
    let trace = refine(&transform(&f, Backend::Dct)?, &params, 0)?;
    let worst = (0..trace.attention.rows())
        .map(|r| (trace.attention.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(check("attention rows sum to one", worst, 1e-12));
    let delta = causal_tune(&f, &params, &filt, 0)?;
    let band = inverse(&split(&transform(&f, Backend::Dct)?, &filt)?.causal)?;
    out.push(check("fresh adapter is band-pass", delta.max_abs_diff(&band), 1e-9));
    let mut trained = params.clone();
    if let Some(l) = trained.layers[0].as_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in l.mlp2.layers[0].weight.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let shifted = FeatureMap::from_fn(8, 8, 8, |h, w, c| f.get(h, w, c) + 3.5 - 0.25 * c as f64)?;
    let a = causal_tune(&f, &trained, &filt, 0)?;
    let b = causal_tune(&shifted, &trained, &filt, 0)?;
    out.push(check("constant offset invariance", a.max_abs_diff(&b), 1e-9));
    Ok(())
}

fn autodiff_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.param("x", Matrix::filled(1, 1, 3.0));
    let y = tape.sum_sq(x);
    let g = tape.backward(y)?;
    out.push(check(
        "d(x^2)/dx at 3",
        (g.get("x").map_or(0.0, |m| m[(0, 0)]) - 6.0).abs(),
        1e-12,
    ));
    let mut params = NamedTensors::new();
    params.insert("w".into(), Matrix::filled(1, 1, 1.0));
    let mut grads = NamedTensors::new();
    grads.insert("w".into(), Matrix::filled(1, 1, 1.0));
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    opt.step(&mut params, &Gradients::from_map(grads))?;
    out.push(check(
        "adamw first step",
        (params["w"][(0, 0)] - (1.0 - 0.1 / (1.0 + 1e-8))).abs(),
        1e-12,
    ));
    Ok(())
}

fn bench_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1])?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1])?;
    out.push(check(
        "miou worked example",
        (miou(&pred, &gt, 2)?.miou - 7.0 / 12.0).abs(),
        1e-15,
    ));
    let scene = gen_scene(0);
    out.push(flag("scene determinism", scene == gen_scene(0)));
    let unchanged = CorruptionKind::ALL.iter().all(|&k| {
        corrupt(&scene.image, &Corruption::none(k))
            .map(|i| i == scene.image)
            .unwrap_or(false)
    });
    out.push(flag("zero severity identity", unchanged));
    let bright = corrupt(&Image::filled(4, 4, 0.5), &Corruption::Brightness { shift: 0.2 })?;
    out.push(check(
        "brightness shift",
        bright.data().iter().map(|v| (v - 0.7).abs()).fold(0.0, f64::max),
        1e-12,
    ));
    Ok(())
}

fn format_checks(out: &mut Vec<SelfTestResult>) -> Result<()> {
    let t = CtenTensor::new(
        "x",
        vec![2, 3],
        vec![0.1, -0.0, f64::MAX, f64::MIN_POSITIVE, 1e-300, -7.5],
    )?;
    let mut buf = Vec::new();
    cten::write(&mut buf, std::slice::from_ref(&t))?;
    let back = cten::read(&buf[..])?;
    let exact = back.len() == 1
        && back[0]
            .data
            .iter()
            .zip(&t.data)
            .all(|(a, b)| a.to_bits() == b.to_bits())
        && back[0].dims == t.dims;
    out.push(flag("cten roundtrip", exact));
    let a = ToyBackbone::new(BackboneConfig::default())?;
    let b = ToyBackbone::new(BackboneConfig::default())?;
    out.push(flag("backbone determinism", a.fingerprint() == b.fingerprint()));
    Ok(())
}

/// Fast invariant checks across every module.
pub fn selftest() -> Result<Vec<SelfTestResult>> {
    let mut out = Vec::new();
    transform_checks(&mut out)?;
    filter_checks(&mut out)?;
    adapter_checks(&mut out)?;
    autodiff_checks(&mut out)?;
    bench_checks(&mut out)?;
    format_checks(&mut out)?;
    Ok(out)
}
