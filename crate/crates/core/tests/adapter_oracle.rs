//! The adapter recomputed with literal sums and nested loops.
#![allow(clippy::needless_range_loop)]

use causal_tune::adapter::{causal_tune, AdapterParams, AdapterShape, Affine};
use causal_tune::filtering::{band_pass_gain, BandPassFilter, FilterMode};
use causal_tune::spectral::{Backend, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

type Rows = Vec<Vec<f64>>;

fn alpha(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

fn basis(k: usize, x: usize, n: usize) -> f64 {
    alpha(k, n) * (PI * (2 * x + 1) as f64 * k as f64 / (2.0 * n as f64)).cos()
}

fn dct(f: &FeatureMap) -> Rows {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let mut out = vec![vec![0.0; c]; h * w];
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for x in 0..h {
                    for y in 0..w {
                        acc += f.get(x, y, ch) * basis(u, x, h) * basis(v, y, w);
                    }
                }
                out[u * w + v][ch] = acc;
            }
        }
    }
    out
}

fn idct(s: &Rows, h: usize, w: usize) -> Rows {
    let c = s[0].len();
    let mut out = vec![vec![0.0; c]; h * w];
    for x in 0..h {
        for y in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        acc += s[u * w + v][ch] * basis(u, x, h) * basis(v, y, w);
                    }
                }
                out[x * w + y][ch] = acc;
            }
        }
    }
    out
}

fn matmul(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn rows_of(m: &causal_tune::Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(x: &Rows, layers: &[Affine]) -> Rows {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            h = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        }
        let bias = l.bias.row(0);
        h = matmul(&h, &rows_of(&l.weight))
            .into_iter()
            .map(|r| r.iter().zip(bias).map(|(a, b)| a + b).collect())
            .collect();
    }
    h
}

fn oracle(f: &FeatureMap, params: &AdapterParams, rl: f64, rh: f64) -> Rows {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let layer = params.layers[0].as_ref().unwrap();
    let mut causal = dct(f);
    for u in 0..h {
        for v in 0..w {
            let rho = ((u as f64 / (h - 1) as f64).powi(2) + (v as f64 / (w - 1) as f64).powi(2)).sqrt();
            let g = (-rho * rho / (2.0 * rh * rh)).exp() - (-rho * rho / (2.0 * rl * rl)).exp();
            for x in causal[u * w + v].iter_mut() {
                *x *= g;
            }
        }
    }
    let tokens = matmul(&rows_of(&layer.b), &rows_of(&layer.a));
    let values = mlp(&tokens, &layer.mlp1.layers);
    let mut intermediate = causal.clone();
    for (q, row) in causal.iter().enumerate() {
        let scores: Vec<f64> = tokens
            .iter()
            .map(|t| t.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (j, val) in values.iter().enumerate() {
            for ch in 0..c {
                intermediate[q][ch] += e[j] / z * val[ch];
            }
        }
    }
    let branch = mlp(&intermediate, &layer.mlp2.layers);
    let refined: Rows = causal
        .iter()
        .zip(&branch)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    idct(&refined, h, w)
}

fn setup(depth: usize, seed: u64) -> (FeatureMap, AdapterParams) {
    let shape = AdapterShape {
        tokens: 5,
        rank: 2,
        channels: 4,
        mlp_depth: depth,
    };
    let mut params = AdapterParams::init(shape, &[true], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for l in &mut params.layers[0].as_mut().unwrap().mlp2.layers {
        for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()) {
            *v = rng.random_range(-0.4..0.4);
        }
    }
    let f = FeatureMap::from_fn(6, 5, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
    (f, params)
}

#[test]
fn matches_straight_line_oracle() {
    for (depth, seed) in [(1, 3), (2, 4)] {
        let (f, params) = setup(depth, seed);
        let filt = BandPassFilter::for_backend(Backend::Dct, 0.2, 0.7, 6, 5, FilterMode::BandPass).unwrap();
        let got = causal_tune(&f, &params, &filt, 0).unwrap();
        let want = oracle(&f, &params, 0.2, 0.7);
        for (r, row) in want.iter().enumerate() {
            for (ch, v) in row.iter().enumerate() {
                let g = got.get(r / 5, r % 5, ch);
                assert!((g - v).abs() <= 1e-10, "depth {depth} row {r} ch {ch}: {g} vs {v}");
            }
        }
    }
}

#[test]
fn gain_matches_closed_form() {
    let filt = BandPassFilter::for_backend(Backend::Dct, 0.2, 0.7, 6, 5, FilterMode::BandPass).unwrap();
    for u in 0..6 {
        for v in 0..5 {
            let rho = ((u as f64 / 5.0).powi(2) + (v as f64 / 4.0).powi(2)).sqrt();
            assert!((filt.at(u, v) - band_pass_gain(rho, 0.2, 0.7)).abs() <= 1e-15);
        }
    }
}

#[test]
fn constant_offset_leaves_delta_unchanged() {
    let (f, params) = setup(2, 9);
    for backend in Backend::ALL {
        let (h, w) = (8, 8);
        let g = FeatureMap::from_fn(h, w, 4, |y, x, c| f.get(y % 6, x % 5, c)).unwrap();
        let filt = BandPassFilter::for_backend(backend, 0.2, 0.7, h, w, FilterMode::BandPass).unwrap();
        let shifted = FeatureMap::from_fn(h, w, 4, |y, x, c| g.get(y, x, c) - 2.0 + c as f64).unwrap();
        let a = causal_tune(&g, &params, &filt, 0).unwrap();
        let b = causal_tune(&shifted, &params, &filt, 0).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9, "{backend}");
    }
}
