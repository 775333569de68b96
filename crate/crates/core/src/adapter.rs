//! Low-rank causal-aware tokens refining the band-passed spectrum.
//!
//! Per adapted layer the block computes
//!
//! ```text
//! T  = B · A                                 (m × c tokens, rank r)
//! W  = softmax(F · Tᵀ / √c)                  (one row per frequency cell)
//! F̃  = F + W · MLP₁(T)
//! F̂  = F + MLP₂(F̃)
//! Δf = inverse(F̂)
//! ```
//!
//! where `F` is the causal part of the transformed layer output. The
//! non-causal part never re-enters the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NamedTensors, Tape, Var};
use crate::error::{Error, Result};
use crate::filtering::BandPassFilter;
use crate::spectral::{Backend, FeatureMap, Spectrum};
use crate::tensor::Matrix;

/// Affine map `x · weight + bias` with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Affine {
    fn zeros(c: usize) -> Self {
        Self {
            weight: Matrix::zeros(c, c),
            bias: Matrix::zeros(1, c),
        }
    }

    fn uniform(c: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Matrix::from_fn(c, c, |_, _| rng.random_range(-bound..bound)),
            bias: Matrix::from_fn(1, c, |_, _| rng.random_range(-bound..bound)),
        }
    }
}

/// Stack of affine maps with GELU between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.map(crate::autodiff::gelu);
            }
            h = h.matmul(&layer.weight).add_row_broadcast(&layer.bias);
        }
        h
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .last()
            .is_some_and(|l| l.weight.max_abs() == 0.0 && l.bias.max_abs() == 0.0)
    }
}

/// Parameters of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapter {
    /// `m × r`
    pub b: Matrix,
    /// `r × c`
    pub a: Matrix,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

/// Shape of the adapter stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterShape {
    pub tokens: usize,
    pub rank: usize,
    pub channels: usize,
    pub mlp_depth: usize,
}

impl AdapterShape {
    pub fn validate(&self) -> Result<()> {
        let AdapterShape {
            tokens: m,
            rank: r,
            channels: c,
            mlp_depth,
        } = *self;
        if m < 1 || c < 1 || r < 1 || r > m.min(c) {
            return Err(Error::Parameter(format!(
                "adapter needs m >= 1 and 1 <= r <= min(m, c); got m={m}, r={r}, c={c}"
            )));
        }
        if !(1..=2).contains(&mlp_depth) {
            return Err(Error::Parameter(format!("mlp depth must be 1 or 2, got {mlp_depth}")));
        }
        Ok(())
    }
}

/// Adapter parameters for every backbone layer; `None` marks a layer that
/// is left unadapted.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub shape: AdapterShape,
    pub layers: Vec<Option<LayerAdapter>>,
}

impl AdapterParams {
    /// `B`, `A` ~ U(±1/√r); `MLP₁` ~ U(±1/√c); the last `MLP₂` layer is zero
    /// so a fresh adapter outputs the plain band-passed feature.
    pub fn init(shape: AdapterShape, enabled: &[bool], seed: u64) -> Result<Self> {
        shape.validate()?;
        let AdapterShape {
            tokens: m,
            rank: r,
            channels: c,
            mlp_depth,
        } = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let br = 1.0 / (r as f64).sqrt();
        let bc = 1.0 / (c as f64).sqrt();
        let layers = enabled
            .iter()
            .map(|&on| {
                let b = Matrix::from_fn(m, r, |_, _| rng.random_range(-br..br));
                let a = Matrix::from_fn(r, c, |_, _| rng.random_range(-br..br));
                let mlp1 = Mlp {
                    layers: (0..mlp_depth).map(|_| Affine::uniform(c, bc, &mut rng)).collect(),
                };
                let mut mlp2_layers: Vec<Affine> =
                    (0..mlp_depth - 1).map(|_| Affine::uniform(c, bc, &mut rng)).collect();
                mlp2_layers.push(Affine::zeros(c));
                on.then_some(LayerAdapter {
                    b,
                    a,
                    mlp1,
                    mlp2: Mlp { layers: mlp2_layers },
                })
            })
            .collect();
        Ok(Self { shape, layers })
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerAdapter> {
        self.layers
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Validation(format!("no adapter at layer {layer}")))
    }

    pub fn check_finite(&self) -> Result<()> {
        let ok = self.to_named().values().all(Matrix::is_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("adapter parameters contain non-finite values".into()))
        }
    }

    /// One named tensor per matrix: `adapter.<i>.B`, `adapter.<i>.A`,
    /// `adapter.<i>.mlp1.<j>.weight`, ...
    pub fn to_named(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(l) = layer else { continue };
            out.insert(format!("adapter.{i}.B"), l.b.clone());
            out.insert(format!("adapter.{i}.A"), l.a.clone());
            for (tag, mlp) in [("mlp1", &l.mlp1), ("mlp2", &l.mlp2)] {
                for (j, aff) in mlp.layers.iter().enumerate() {
                    out.insert(format!("adapter.{i}.{tag}.{j}.weight"), aff.weight.clone());
                    out.insert(format!("adapter.{i}.{tag}.{j}.bias"), aff.bias.clone());
                }
            }
        }
        out
    }

    /// Overwrites every enabled layer from `named`; shapes must match.
    pub fn load_named(&mut self, named: &NamedTensors) -> Result<()> {
        let fetch = |name: String, like: &Matrix| -> Result<Matrix> {
            let m = named
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))?;
            if m.shape() != like.shape() {
                return Err(Error::Validation(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    m.shape(),
                    like.shape()
                )));
            }
            Ok(m.clone())
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Some(l) = layer else { continue };
            l.b = fetch(format!("adapter.{i}.B"), &l.b)?;
            l.a = fetch(format!("adapter.{i}.A"), &l.a)?;
            for (tag, mlp) in [("mlp1", &mut l.mlp1), ("mlp2", &mut l.mlp2)] {
                for (j, aff) in mlp.layers.iter_mut().enumerate() {
                    aff.weight = fetch(format!("adapter.{i}.{tag}.{j}.weight"), &aff.weight)?;
                    aff.bias = fetch(format!("adapter.{i}.{tag}.{j}.bias"), &aff.bias)?;
                }
            }
        }
        Ok(())
    }
}

/// `T = B · A` for one layer.
pub fn materialize_tokens(params: &AdapterParams, layer: usize) -> Result<Matrix> {
    let l = params.layer(layer)?;
    Ok(l.b.matmul(&l.a))
}

/// Intermediate values of one refinement.
#[derive(Debug, Clone)]
pub struct RefinementTrace {
    /// Pre-softmax scores `F · Tᵀ / √c`.
    pub logits: Matrix,
    /// Attention weights, one row per frequency cell.
    pub attention: Matrix,
    pub intermediate: Spectrum,
    pub refined: Spectrum,
    pub spatial: FeatureMap,
}

/// Tape handles for one layer's adapter.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub b: Var,
    pub a: Var,
    pub mlp1: Vec<(Var, Var)>,
    pub mlp2: Vec<(Var, Var)>,
}

impl AdapterVars {
    /// Records layer `layer`'s tensors from `named`; trainable when
    /// `trainable` is set.
    pub fn register(
        tape: &mut Tape,
        named: &NamedTensors,
        layer: usize,
        mlp_depth: usize,
        trainable: bool,
    ) -> Result<Self> {
        let mut leaf = |name: String| -> Result<Var> {
            let m = named
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))?
                .clone();
            Ok(if trainable {
                tape.param(name, m)
            } else {
                tape.constant(m)
            })
        };
        let b = leaf(format!("adapter.{layer}.B"))?;
        let a = leaf(format!("adapter.{layer}.A"))?;
        let mut mlps = [Vec::new(), Vec::new()];
        for (slot, tag) in mlps.iter_mut().zip(["mlp1", "mlp2"]) {
            for j in 0..mlp_depth {
                let w = leaf(format!("adapter.{layer}.{tag}.{j}.weight"))?;
                let bias = leaf(format!("adapter.{layer}.{tag}.{j}.bias"))?;
                slot.push((w, bias));
            }
        }
        let [mlp1, mlp2] = mlps;
        Ok(Self { b, a, mlp1, mlp2 })
    }
}

fn mlp_on_tape(tape: &mut Tape, x: Var, layers: &[(Var, Var)]) -> Var {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        if i > 0 {
            h = tape.gelu(h);
        }
        let z = tape.matmul(h, w);
        h = tape.add_row(z, b);
    }
    h
}

/// Tape handles produced by [`refine_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct RefineVars {
    pub logits: Var,
    pub attention: Var,
    pub intermediate: Var,
    pub refined: Var,
}

/// Attention refinement of a causal spectrum in row form (`q × c`).
pub fn refine_on_tape(tape: &mut Tape, causal: Var, vars: &AdapterVars) -> RefineVars {
    let c = tape.value(causal).cols();
    let tokens = tape.matmul(vars.b, vars.a);
    let scores = tape.matmul_t(causal, tokens);
    let logits = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attention = tape.softmax_rows(logits);
    let values = mlp_on_tape(tape, tokens, &vars.mlp1);
    let mixed = tape.matmul(attention, values);
    let intermediate = tape.add(causal, mixed);
    let branch = mlp_on_tape(tape, intermediate, &vars.mlp2);
    let refined = tape.add(causal, branch);
    RefineVars {
        logits,
        attention,
        intermediate,
        refined,
    }
}

/// `Δf` for a `(h·w) × c` spatial matrix on the tape.
pub fn causal_tune_on_tape(
    tape: &mut Tape,
    f: Var,
    h: usize,
    w: usize,
    vars: &AdapterVars,
    filt: &BandPassFilter,
) -> Var {
    let backend = filt.backend();
    let spectrum = tape.spectral(f, backend, h, w);
    let causal = tape.scale_rows(spectrum, filt.row_gains());
    let refined = refine_on_tape(tape, causal, vars).refined;
    tape.inverse_spectral(refined, backend, h, w)
}

fn layer_named(params: &AdapterParams, layer: usize) -> Result<NamedTensors> {
    params.layer(layer)?;
    let prefix = format!("adapter.{layer}.");
    Ok(params
        .to_named()
        .into_iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .collect())
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Runs the token refinement on a causal spectrum of any backend.
pub fn refine(causal: &Spectrum, params: &AdapterParams, layer: usize) -> Result<RefinementTrace> {
    if causal.channels() != params.shape.channels {
        return Err(Error::Validation(format!(
            "spectrum has {} channels, adapter expects {}",
            causal.channels(),
            params.shape.channels
        )));
    }
    let named = layer_named(params, layer)?;
    let mut tape = Tape::new();
    let vars = AdapterVars::register(&mut tape, &named, layer, params.shape.mlp_depth, false)?;
    let input = tape.constant(causal.to_rows());
    let out = refine_on_tape(&mut tape, input, &vars);
    for (v, what) in [
        (out.attention, "attention weights"),
        (out.intermediate, "intermediate spectrum"),
        (out.refined, "refined spectrum"),
    ] {
        check_finite(tape.value(v), what)?;
    }
    let (h, w, backend) = (causal.height(), causal.width(), causal.backend());
    let refined = Spectrum::from_rows(h, w, backend, tape.value(out.refined))?;
    let spatial = crate::spectral::inverse(&refined)?;
    Ok(RefinementTrace {
        logits: tape.value(out.logits).clone(),
        attention: tape.value(out.attention).clone(),
        intermediate: Spectrum::from_rows(h, w, backend, tape.value(out.intermediate))?,
        refined,
        spatial,
    })
}

/// `Δf = inverse(refine(split(transform(f), G).causal))` using the filter's
/// backend.
pub fn causal_tune(f: &FeatureMap, params: &AdapterParams, filt: &BandPassFilter, layer: usize) -> Result<FeatureMap> {
    if f.height() != filt.height() || f.width() != filt.width() {
        return Err(Error::Validation(format!(
            "feature map {}x{} does not match filter {}x{}",
            f.height(),
            f.width(),
            filt.height(),
            filt.width()
        )));
    }
    let spectrum = crate::spectral::transform(f, filt.backend())?;
    let parts = crate::filtering::split(&spectrum, filt)?;
    Ok(refine(&parts.causal, params, layer)?.spatial)
}

/// Backends whose spectra are real-valued.
pub fn is_real_backend(b: Backend) -> bool {
    matches!(b, Backend::Dct | Backend::Haar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::{build_filter, FilterMode};
    use crate::spectral::{inverse, transform};

    fn shape(m: usize, r: usize, c: usize) -> AdapterShape {
        AdapterShape {
            tokens: m,
            rank: r,
            channels: c,
            mlp_depth: 1,
        }
    }

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rank_bounds_validated() {
        assert!(AdapterParams::init(shape(4, 5, 8), &[true], 0).is_err());
        assert!(AdapterParams::init(shape(4, 0, 8), &[true], 0).is_err());
        assert!(AdapterParams::init(shape(4, 4, 3), &[true], 0).is_err());
        assert!(AdapterParams::init(shape(4, 3, 3), &[true], 0).is_ok());
    }

    #[test]
    fn identity_padded_factors() {
        let mut p = AdapterParams::init(shape(4, 2, 3), &[true], 0).unwrap();
        let l = p.layers[0].as_mut().unwrap();
        l.b = Matrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        l.a = Matrix::from_fn(2, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let t = materialize_tokens(&p, 0).unwrap();
        let expected = Matrix::from_fn(4, 3, |i, j| if i == j && i < 2 { 1.0 } else { 0.0 });
        assert_eq!(t, expected);
    }

    #[test]
    fn rank_one_tokens_repeat_row() {
        let mut p = AdapterParams::init(shape(5, 1, 3), &[true], 0).unwrap();
        let l = p.layers[0].as_mut().unwrap();
        l.b = Matrix::filled(5, 1, 1.0);
        l.a = Matrix::from_vec(1, 3, vec![0.5, -2.0, 3.0]).unwrap();
        let t = materialize_tokens(&p, 0).unwrap();
        for i in 0..5 {
            assert_eq!(t.row(i), &[0.5, -2.0, 3.0]);
        }
    }

    #[test]
    fn disabled_layer_is_index_error() {
        let p = AdapterParams::init(shape(4, 2, 3), &[true, false], 0).unwrap();
        assert!(materialize_tokens(&p, 1).is_err());
        assert!(materialize_tokens(&p, 2).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let p = AdapterParams::init(shape(16, 4, 8), &[true], 3).unwrap();
        let s = transform(&random_map(6, 6, 8, 1), Backend::Dct).unwrap();
        let trace = refine(&s, &p, 0).unwrap();
        assert_eq!(trace.attention.shape(), (36, 16));
        for r in 0..36 {
            let sum: f64 = trace.attention.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_second_mlp_returns_input() {
        let p = AdapterParams::init(shape(8, 2, 4), &[true], 9).unwrap();
        assert!(p.layers[0].as_ref().unwrap().mlp2.is_zero());
        let s = transform(&random_map(4, 4, 4, 2), Backend::Dct).unwrap();
        let trace = refine(&s, &p, 0).unwrap();
        assert_eq!(trace.refined, s);
    }

    #[test]
    fn logits_scaled_by_inverse_sqrt_c() {
        let p = AdapterParams::init(shape(6, 3, 9), &[true], 4).unwrap();
        let s = transform(&random_map(4, 4, 9, 5), Backend::Dct).unwrap();
        let trace = refine(&s, &p, 0).unwrap();
        let t = materialize_tokens(&p, 0).unwrap();
        let raw = s.to_rows().matmul_t(&t);
        assert!(trace.logits.max_abs_diff(&raw.scale(1.0 / 3.0)) <= 1e-15);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = AdapterParams::init(shape(4, 2, 4), &[true], 0).unwrap();
        let s = transform(&random_map(4, 4, 3, 0), Backend::Dct).unwrap();
        assert!(matches!(refine(&s, &p, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn fresh_adapter_outputs_band_passed_feature() {
        let p = AdapterParams::init(shape(16, 4, 6), &[true], 1).unwrap();
        let f = random_map(8, 8, 6, 7);
        let filt = build_filter(0.2, 0.7, 8, 8, FilterMode::BandPass).unwrap();
        let delta = causal_tune(&f, &p, &filt, 0).unwrap();
        let s = transform(&f, Backend::Dct).unwrap();
        let g = crate::filtering::split(&s, &filt).unwrap().causal;
        assert!(delta.max_abs_diff(&inverse(&g).unwrap()) <= 1e-9);
    }

    #[test]
    fn named_roundtrip() {
        let shape = AdapterShape {
            mlp_depth: 2,
            ..shape(4, 2, 3)
        };
        let p = AdapterParams::init(shape, &[true, false, true], 5).unwrap();
        let named = p.to_named();
        assert_eq!(named.len(), 2 * (2 + 2 * 2 * 2));
        let mut q = AdapterParams::init(shape, &[true, false, true], 6).unwrap();
        assert_ne!(p, q);
        q.load_named(&named).unwrap();
        assert_eq!(p, q);
    }
}
