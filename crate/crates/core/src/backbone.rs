//! A small frozen pre-norm transformer over patch tokens, a linear
//! segmentation head, optional artifact injection, and the wiring that
//! inserts an adapter between consecutive layers:
//!
//! ```text
//! x₀ = embed((image − μ) / σ)
//! fᵢ = Lᵢ(xᵢ₋₁) (+ artifact bias)
//! xᵢ = fᵢ + Δfᵢ          (Δfᵢ = 0 on unadapted layers)
//! logits = upsample(τ · (norm(x_N) · W_head + b_head))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{causal_tune_on_tape, AdapterParams, AdapterVars};
use crate::autodiff::{Gradients, NamedTensors, Tape, Var};
use crate::error::{Error, Result};
use crate::filtering::FilterConfig;
use crate::image::{Image, LabelMap};
use crate::spectral::FeatureMap;
use crate::synthbench::Segmenter;
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
/// Pixels are standardized with these constants before embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;
pub const DEFAULT_LOGIT_SCALE: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 4,
            channels: 32,
            heads: 2,
            ffn: 64,
            patch: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.heads == 0 || self.ffn == 0 || self.patch == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels do not split into {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_scale: Matrix,
    ln1_offset: Matrix,
    /// Per head: `c × d` query, key and value projections, `d × c` output.
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    wo: Vec<Matrix>,
    ln2_scale: Matrix,
    ln2_offset: Matrix,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

/// Frozen encoder. Weights are `U(±1/√fan_in)` from a ChaCha8 stream,
/// embedding and attention carry no bias, norms start at scale 1 offset 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    config: BackboneConfig,
    /// `3p² × c`
    embedding: Matrix,
    blocks: Vec<Block>,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl ToyBackbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let BackboneConfig {
            seed,
            layers,
            channels: c,
            heads,
            ffn,
            patch,
        } = config;
        let d = c / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = 3 * patch * patch;
        let embedding = uniform(patch_dim, c, patch_dim, &mut rng);
        let blocks = (0..layers)
            .map(|_| {
                let mut proj = || (0..heads).map(|_| uniform(c, d, c, &mut rng)).collect::<Vec<_>>();
                let (wq, wk, wv) = (proj(), proj(), proj());
                let wo = (0..heads).map(|_| uniform(d, c, c, &mut rng)).collect();
                Block {
                    ln1_scale: Matrix::filled(1, c, 1.0),
                    ln1_offset: Matrix::zeros(1, c),
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2_scale: Matrix::filled(1, c, 1.0),
                    ln2_offset: Matrix::zeros(1, c),
                    w1: uniform(c, ffn, c, &mut rng),
                    b1: uniform(1, ffn, c, &mut rng),
                    w2: uniform(ffn, c, ffn, &mut rng),
                    b2: uniform(1, c, ffn, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn patch(&self) -> usize {
        self.config.patch
    }

    /// Token grid for an image of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.config.patch;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Validation(format!(
                "{height}x{width} image is not divisible into {p}x{p} patches"
            )));
        }
        Ok((height / p, width / p))
    }

    /// Flattened patches, one row per token in row-major grid order; each
    /// row lists the patch pixels row-major with RGB innermost.
    pub fn patchify(&self, image: &Image) -> Result<Matrix> {
        let (gh, gw) = self.grid(image.height(), image.width())?;
        let p = self.config.patch;
        let mut out = Matrix::zeros(gh * gw, 3 * p * p);
        for ty in 0..gh {
            for tx in 0..gw {
                let row = out.row_mut(ty * gw + tx);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..3 {
                            row[k] = image.get(ty * p + dy, tx * p + dx, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn embed(&self, image: &Image) -> Result<FeatureMap> {
        let (gh, gw) = self.grid(image.height(), image.width())?;
        FeatureMap::from_matrix(gh, gw, self.patchify(image)?.matmul(&self.embedding))
    }

    /// Embedding of the standardized image `(x − PIXEL_MEAN) / PIXEL_STD`.
    pub fn tokens(&self, image: &Image) -> Result<FeatureMap> {
        let mut std = image.clone();
        for v in std.data_mut() {
            *v = (*v - PIXEL_MEAN) / PIXEL_STD;
        }
        self.embed(&std)
    }

    /// Layer `layer` (0-based) applied to a `tokens × c` variable.
    pub fn block_on_tape(&self, tape: &mut Tape, x: Var, layer: usize) -> Var {
        let b = &self.blocks[layer];
        let d = self.config.channels / self.config.heads;
        let h = affine_norm(tape, x, &b.ln1_scale, &b.ln1_offset);
        let mut attn: Option<Var> = None;
        for head in 0..self.config.heads {
            let wq = tape.constant(b.wq[head].clone());
            let wk = tape.constant(b.wk[head].clone());
            let wv = tape.constant(b.wv[head].clone());
            let wo = tape.constant(b.wo[head].clone());
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let weights = tape.softmax_rows(scores);
            let mixed = tape.matmul(weights, v);
            let out = tape.matmul(mixed, wo);
            attn = Some(match attn {
                Some(acc) => tape.add(acc, out),
                None => out,
            });
        }
        let x = tape.add(x, attn.expect("at least one head"));
        let h = affine_norm(tape, x, &b.ln2_scale, &b.ln2_offset);
        let w1 = tape.constant(b.w1.clone());
        let b1 = tape.constant(b.b1.clone());
        let w2 = tape.constant(b.w2.clone());
        let b2 = tape.constant(b.b2.clone());
        let z = tape.matmul(h, w1);
        let z = tape.add_row(z, b1);
        let z = tape.gelu(z);
        let z = tape.matmul(z, w2);
        let z = tape.add_row(z, b2);
        tape.add(x, z)
    }

    /// Plain propagation `f_{i+1} = L_{i+1}(f_i)`; returns every layer output.
    pub fn propagate(&self, x0: &FeatureMap) -> Result<Vec<FeatureMap>> {
        if x0.channels() != self.config.channels {
            return Err(Error::Validation(format!(
                "feature map has {} channels, backbone expects {}",
                x0.channels(),
                self.config.channels
            )));
        }
        let mut tape = Tape::new();
        let mut x = tape.constant(x0.to_matrix());
        let mut out = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            x = self.block_on_tape(&mut tape, x, i);
            out.push(FeatureMap::from_matrix(x0.height(), x0.width(), tape.value(x).clone())?);
        }
        Ok(out)
    }

    /// Lower-case hex SHA-256 over every parameter in a fixed order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.embedding.to_le_bytes());
        for b in &self.blocks {
            for m in [&b.ln1_scale, &b.ln1_offset] {
                hasher.update(m.to_le_bytes());
            }
            for m in b.wq.iter().chain(&b.wk).chain(&b.wv).chain(&b.wo) {
                hasher.update(m.to_le_bytes());
            }
            for m in [&b.ln2_scale, &b.ln2_offset, &b.w1, &b.b1, &b.w2, &b.b2] {
                hasher.update(m.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn affine_norm(tape: &mut Tape, x: Var, scale: &Matrix, offset: &Matrix) -> Var {
    let n = tape.layer_norm(x, LN_EPS);
    let s = tape.constant(scale.clone());
    let o = tape.constant(offset.clone());
    let n = tape.mul_row(n, s);
    tape.add_row(n, o)
}

/// Adds `β · direction` at a fixed set of tokens in selected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactInjector {
    /// 0-based layer indices.
    layers: Vec<usize>,
    tokens: Vec<usize>,
    /// Unit vector of length `c`.
    direction: Vec<f64>,
    beta: f64,
}

impl ArtifactInjector {
    /// Draws `count` distinct token positions out of `grid_tokens` and a
    /// random unit direction from `seed`.
    pub fn seeded(
        layers: Vec<usize>,
        grid_tokens: usize,
        count: usize,
        channels: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        if count > grid_tokens {
            return Err(Error::Config(format!(
                "cannot place {count} artifact tokens on a grid of {grid_tokens}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = rand::seq::index::sample(&mut rng, grid_tokens, count).into_vec();
        tokens.sort_unstable();
        let normal = rand_distr::StandardNormal;
        let raw: Vec<f64> = (0..channels).map(|_| rng.sample::<f64, _>(normal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let direction = raw.into_iter().map(|v| v / norm).collect();
        Self::new(layers, tokens, direction, beta)
    }

    pub fn new(layers: Vec<usize>, tokens: Vec<usize>, direction: Vec<f64>, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("artifact magnitude must be >= 0, got {beta}")));
        }
        Ok(Self {
            layers,
            tokens,
            direction,
            beta,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.layers.clone(), self.tokens.clone(), self.direction.clone(), beta)
    }

    pub fn affects(&self, layer: usize) -> bool {
        self.beta > 0.0 && self.layers.contains(&layer)
    }

    /// `tokens × c` matrix that is zero except at the artifact rows.
    pub fn bias(&self, grid_tokens: usize, channels: usize) -> Result<Matrix> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= grid_tokens) {
            return Err(Error::Validation(format!(
                "artifact token {t} outside a grid of {grid_tokens}"
            )));
        }
        if self.direction.len() != channels {
            return Err(Error::Validation(format!(
                "artifact direction has {} channels, features {channels}",
                self.direction.len()
            )));
        }
        let mut m = Matrix::zeros(grid_tokens, channels);
        for &t in &self.tokens {
            for (o, d) in m.row_mut(t).iter_mut().zip(&self.direction) {
                *o = self.beta * d;
            }
        }
        Ok(m)
    }
}

/// Root-mean-square of every entry.
pub fn feature_rms(f: &FeatureMap) -> f64 {
    (f.norm_sq() / f.data().len() as f64).sqrt()
}

/// Adapters attached to a model: layout plus the filter that selects the
/// causal band.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSetup {
    pub enabled: Vec<bool>,
    pub mlp_depth: usize,
    pub filter: FilterConfig,
}

/// Frozen backbone, optional adapters and injector, trainable head on
/// layer-normalized final features.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: ToyBackbone,
    pub classes: usize,
    pub adapters: Option<AdapterSetup>,
    pub injector: Option<ArtifactInjector>,
    /// Fixed multiplier on the head output.
    pub logit_scale: f64,
    /// Trainable tensors: `adapter.*` and `head.weight` (`c × K`), `head.bias`.
    pub params: NamedTensors,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `(H·W) × K` per-pixel logits.
    pub logits: Var,
    /// Layer outputs `fᵢ` after artifact injection, before refinement.
    pub layer_outputs: Vec<Var>,
    /// Inputs to the next layer, `fᵢ + Δfᵢ`.
    pub propagated: Vec<Var>,
    pub grid: (usize, usize),
}

impl SegModel {
    /// Zero head; adapter tensors taken from `adapters` when given.
    pub fn new(
        backbone: ToyBackbone,
        classes: usize,
        adapters: Option<(AdapterParams, FilterConfig)>,
        injector: Option<ArtifactInjector>,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let c = backbone.channels();
        let mut params = NamedTensors::new();
        let setup = match adapters {
            Some((ap, filter)) => {
                if ap.shape.channels != c || ap.layers.len() != backbone.layers() {
                    return Err(Error::Config(format!(
                        "adapter stack ({} layers, {} channels) does not fit backbone ({} layers, {c} channels)",
                        ap.layers.len(),
                        ap.shape.channels,
                        backbone.layers()
                    )));
                }
                params.extend(ap.to_named());
                Some(AdapterSetup {
                    enabled: ap.layers.iter().map(Option::is_some).collect(),
                    mlp_depth: ap.shape.mlp_depth,
                    filter,
                })
            }
            None => None,
        };
        params.insert("head.weight".into(), Matrix::zeros(c, classes));
        params.insert("head.bias".into(), Matrix::zeros(1, classes));
        Ok(Self {
            backbone,
            classes,
            adapters: setup,
            injector,
            logit_scale: DEFAULT_LOGIT_SCALE,
            params,
        })
    }

    /// Records the forward pass starting from embedded tokens `x0`
    /// (`gh·gw × c`). Tensors in `params` become trainable leaves when
    /// `trainable` is set.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        x0: Var,
        grid: (usize, usize),
        params: &NamedTensors,
        trainable: bool,
    ) -> Result<ForwardVars> {
        let (gh, gw) = grid;
        let c = self.backbone.channels();
        if tape.value(x0).shape() != (gh * gw, c) {
            return Err(Error::Validation(format!(
                "input tokens have shape {:?}, expected ({}, {c})",
                tape.value(x0).shape(),
                gh * gw
            )));
        }
        let filter = match &self.adapters {
            Some(setup) => Some(setup.filter.build(gh, gw)?),
            None => None,
        };
        let mut x = x0;
        let mut layer_outputs = Vec::with_capacity(self.backbone.layers());
        let mut propagated = Vec::with_capacity(self.backbone.layers());
        for i in 0..self.backbone.layers() {
            let mut f = self.backbone.block_on_tape(tape, x, i);
            if let Some(inj) = self.injector.as_ref().filter(|inj| inj.affects(i)) {
                f = tape.add_const(f, &inj.bias(gh * gw, c)?);
            }
            layer_outputs.push(f);
            x = match (&self.adapters, &filter) {
                (Some(setup), Some(filt)) if setup.enabled.get(i).copied().unwrap_or(false) => {
                    let vars = AdapterVars::register(tape, params, i, setup.mlp_depth, trainable)?;
                    let delta = causal_tune_on_tape(tape, f, gh, gw, &vars, filt);
                    tape.add(f, delta)
                }
                _ => f,
            };
            propagated.push(x);
        }
        let mut leaf = |name: &str| -> Result<Var> {
            let m = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))?
                .clone();
            Ok(if trainable {
                tape.param(name, m)
            } else {
                tape.constant(m)
            })
        };
        let w = leaf("head.weight")?;
        let b = leaf("head.bias")?;
        let x = tape.layer_norm(x, LN_EPS);
        let z = tape.matmul(x, w);
        let z = tape.add_row(z, b);
        let z = tape.scale(z, self.logit_scale);
        let logits = tape.upsample(z, gh, gw, self.backbone.patch());
        Ok(ForwardVars {
            logits,
            layer_outputs,
            propagated,
            grid,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Image,
        params: &NamedTensors,
        trainable: bool,
    ) -> Result<ForwardVars> {
        let x0 = self.backbone.tokens(image)?;
        let grid = (x0.height(), x0.width());
        let x0 = tape.constant(x0.to_matrix());
        self.forward_from(tape, x0, grid, params, trainable)
    }

    /// Mean pixel cross-entropy under `params`.
    pub fn loss(&self, image: &Image, labels: &LabelMap, params: &NamedTensors) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, params, false)?;
        let loss = tape.cross_entropy(out.logits, &labels.as_indices())?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok(v)
    }

    pub fn loss_and_grads(&self, image: &Image, labels: &LabelMap, params: &NamedTensors) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, params, true)?;
        let loss = tape.cross_entropy(out.logits, &labels.as_indices())?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok((v, tape.backward(loss)?))
    }

    /// Per-pixel logits with the model's own parameters.
    pub fn logits(&self, image: &Image) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, &self.params, false)?;
        Ok(tape.value(out.logits).clone())
    }
}

impl Segmenter for SegModel {
    fn classes(&self) -> usize {
        self.classes
    }

    /// Arg-max over classes; ties go to the lowest index.
    fn predict(&self, image: &Image) -> Result<LabelMap> {
        let z = self.logits(image)?;
        let labels = (0..z.rows())
            .map(|i| {
                let row = z.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(image.height(), image.width(), labels)
    }
}
