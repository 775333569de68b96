//! End-to-end runs: model assembly, training, evaluation, ablation, the
//! cutoff sweep, gradient checks, decomposition and self tests.

mod ablation;
mod decompose;
mod gradcheck;
mod selftest;

pub use ablation::{ablate, sweep, write_ablation_csv, write_sweep_csv, AblationRow, SweepRow};
pub use decompose::{decompose, Decomposition};
pub use gradcheck::{gradcheck_suite, GradCheckEntry, GradCheckSuite, PIPELINE_TOLERANCE, REFINE_TOLERANCE};
pub use selftest::{selftest, SelfTestResult};

use std::io::Write;

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapter::{AdapterParams, AdapterShape};
use crate::autodiff::{AdamW, Gradients, NamedTensors};
use crate::backbone::{feature_rms, ArtifactInjector, SegModel, ToyBackbone};
use crate::config::RunConfig;
use crate::cten::CtenTensor;
use crate::error::{Error, Result};
use crate::synthbench::{evaluate, gen_scene_sized, EvalReport, SynthScene};

/// Builds the model described by `cfg` for square images of side `size`.
pub fn build_model_sized(cfg: &RunConfig, size: usize) -> Result<SegModel> {
    cfg.validate()?;
    let backbone = ToyBackbone::new(cfg.backbone)?;
    let (gh, gw) = backbone.grid(size, size)?;
    let c = backbone.channels();
    let injector = if cfg.injector.scale > 0.0 && !cfg.injector.layers.is_empty() {
        let layers: Vec<usize> = cfg.injector.layers.iter().map(|l| l - 1).collect();
        let probe = gen_scene_sized(cfg.train.scene_seed, size);
        let plain = backbone.propagate(&backbone.tokens(&probe.image)?)?;
        let rms = feature_rms(&plain[layers[0]]);
        let beta = cfg.injector.scale * rms;
        Some(ArtifactInjector::seeded(
            layers,
            gh * gw,
            cfg.injector.tokens,
            c,
            beta,
            cfg.injector.seed,
        )?)
    } else {
        None
    };
    let adapters = if cfg.adapter.enabled {
        let shape = AdapterShape {
            tokens: cfg.adapter.tokens,
            rank: cfg.adapter.rank,
            channels: c,
            mlp_depth: cfg.adapter.mlp_depth,
        };
        let params = AdapterParams::init(shape, &cfg.adapter_layers()?, cfg.adapter.seed)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.filter.build(gh, gw).map_err(|e| Error::Config(e.to_string()))?;
        Some((params, cfg.filter))
    } else {
        None
    };
    let mut model = SegModel::new(backbone, cfg.classes, adapters, injector)?;
    model.logit_scale = cfg.head.logit_scale;
    Ok(model)
}

pub fn build_model(cfg: &RunConfig) -> Result<SegModel> {
    build_model_sized(cfg, cfg.image_size)
}

pub fn training_scenes(cfg: &RunConfig) -> Vec<SynthScene> {
    let start = cfg.train.scene_seed;
    (start..start + cfg.train.scenes as u64)
        .into_par_iter()
        .map(|s| gen_scene_sized(s, cfg.image_size))
        .collect()
}

/// Mean loss over `scenes` under `params`.
pub fn dataset_loss(model: &SegModel, scenes: &[SynthScene], params: &NamedTensors) -> Result<f64> {
    let losses: Vec<f64> = scenes
        .par_iter()
        .map(|s| model.loss(&s.image, &s.labels, params))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub curve: Vec<f64>,
    /// Mean loss over the whole training set before the first update.
    pub initial_loss: f64,
    /// Mean loss over the whole training set after the last update.
    pub final_loss: f64,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

impl TrainReport {
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }

    /// `step,loss`
    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss")?;
        for (i, l) in self.curve.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Trains the model's adapter and head tensors in place with AdamW.
/// Per-sample gradients are computed in parallel and summed in batch order.
pub fn train(cfg: &RunConfig, model: &mut SegModel) -> Result<TrainReport> {
    let scenes = training_scenes(cfg);
    let hash_before = model.backbone.fingerprint();
    let initial_loss = dataset_loss(model, &scenes, &model.params)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let batch = cfg.train.batch.min(scenes.len());
    let mut curve = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let idx = sample(&mut rng, scenes.len(), batch).into_vec();
        let params = &model.params;
        let per_sample: Vec<(f64, Gradients)> = idx
            .par_iter()
            .map(|&i| model.loss_and_grads(&scenes[i].image, &scenes[i].labels, params))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grads: Option<Gradients> = None;
        for (l, g) in &per_sample {
            loss += l;
            match grads.as_mut() {
                Some(acc) => acc.accumulate(g),
                None => grads = Some(g.clone()),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        grads.scale(1.0 / batch as f64);
        loss /= batch as f64;
        if !grads.global_norm().is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        opt.step(&mut model.params, &grads)?;
        if step % 50 == 0 {
            info!("step {step}: loss {loss:.6}");
        }
        curve.push(loss);
    }
    if model.params.values().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("training produced non-finite parameters".into()));
    }
    let final_loss = dataset_loss(model, &scenes, &model.params)?;
    Ok(TrainReport {
        curve,
        initial_loss,
        final_loss,
        backbone_hash_before: hash_before,
        backbone_hash_after: model.backbone.fingerprint(),
    })
}

/// Scores a model on the configured held-out suite.
pub fn eval_model(cfg: &RunConfig, model: &SegModel) -> Result<EvalReport> {
    if cfg.image_size != crate::synthbench::SCENE_SIZE {
        return Err(Error::Config(format!(
            "evaluation scenes are {0}x{0}, config image size is {1}",
            crate::synthbench::SCENE_SIZE,
            cfg.image_size
        )));
    }
    let start = cfg.train.scene_seed;
    evaluate(
        model,
        &cfg.eval.suite,
        cfg.eval.scenes,
        cfg.eval.scene_seed,
        start..start + cfg.train.scenes as u64,
    )
}

/// Result of one train + evaluate cycle.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub train: TrainReport,
    pub eval: EvalReport,
    pub model: SegModel,
}

pub fn train_and_eval(cfg: &RunConfig) -> Result<RunOutcome> {
    let mut model = build_model(cfg)?;
    let train = train(cfg, &mut model)?;
    let eval = eval_model(cfg, &model)?;
    Ok(RunOutcome { train, eval, model })
}

/// Corrupted-domain averages of the adapter model and the head-only
/// baseline for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub adapter: f64,
    pub baseline: f64,
}

/// Config with every model and data-order seed set to `seed`.
pub fn reseeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.backbone.seed = seed;
    c.adapter.seed = seed;
    c.injector.seed = seed;
    c.train.seed = seed;
    c
}

/// Trains the configured adapter model and the same model without
/// adapters for each seed and scores both on the corrupted suite.
pub fn compare_with_baseline(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<SeedComparison>> {
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, true), (s, false)]).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(seed, adapted)| {
            let mut c = reseeded(cfg, seed);
            c.adapter.enabled = adapted;
            Ok(train_and_eval(&c)?.eval.corrupted_average())
        })
        .collect::<Result<_>>()?;
    Ok(seeds
        .iter()
        .zip(scores.chunks(2))
        .map(|(&seed, pair)| SeedComparison {
            seed,
            adapter: pair[0],
            baseline: pair[1],
        })
        .collect())
}

/// `seed,adapter_avg_miou,baseline_avg_miou`
pub fn write_comparison_csv<W: Write>(rows: &[SeedComparison], mut out: W) -> Result<()> {
    writeln!(out, "seed,adapter_avg_miou,baseline_avg_miou")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.seed, r.adapter, r.baseline)?;
    }
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Replaces the model's trainable tensors with `loaded`; names and shapes
/// must match exactly.
pub fn load_params(model: &mut SegModel, loaded: NamedTensors) -> Result<()> {
    if loaded.len() != model.params.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, model expects {}",
            loaded.len(),
            model.params.len()
        )));
    }
    for (name, m) in &loaded {
        match model.params.get(name) {
            Some(cur) if cur.shape() == m.shape() => {}
            Some(cur) => {
                return Err(Error::Validation(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    m.shape(),
                    cur.shape()
                )))
            }
            None => return Err(Error::Validation(format!("unexpected tensor '{name}' in checkpoint"))),
        }
    }
    model.params = loaded;
    Ok(())
}

pub fn params_to_cten(params: &NamedTensors) -> Result<Vec<CtenTensor>> {
    params
        .iter()
        .map(|(n, m)| CtenTensor::from_matrix(n.clone(), m))
        .collect()
}

pub fn params_from_cten(tensors: &[CtenTensor]) -> Result<NamedTensors> {
    tensors.iter().map(|t| Ok((t.name.clone(), t.to_matrix()?))).collect()
}
