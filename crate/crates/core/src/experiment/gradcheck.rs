use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::build_model_sized;
use crate::adapter::{refine_on_tape, AdapterParams, AdapterShape, AdapterVars};
use crate::autodiff::{finite_diff_check, GradCheckReport, Gradients, NamedTensors, Tape};
use crate::config::RunConfig;
use crate::error::Result;
use crate::spectral::Backend;
use crate::synthbench::gen_scene_sized;
use crate::tensor::Matrix;

pub const REFINE_TOLERANCE: f64 = 1e-6;
pub const PIPELINE_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-5;
const PIPELINE_IMAGE: usize = 16;
/// Coordinates sampled per tensor.
const PER_TENSOR: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    /// `refine` or `pipeline`.
    pub suite: &'static str,
    pub backend: Backend,
    pub tensor: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

impl fmt::Display for GradCheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} {:<4} {:<28} coords {:>4}  max rel err {:.3e}  (tol {:.0e}) {}",
            self.suite,
            self.backend,
            self.tensor,
            self.report.coordinates_checked,
            self.report.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSuite {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn coordinates(&self, suite: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.suite == suite)
            .map(|e| e.report.coordinates_checked)
            .sum()
    }

    pub fn max_error(&self, suite: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.suite == suite)
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Checks each tensor separately so every parameter class gets sampled.
fn per_tensor(
    suite: &'static str,
    backend: Backend,
    tolerance: f64,
    params: &NamedTensors,
    grads: &Gradients,
    loss: &dyn Fn(&NamedTensors) -> f64,
    seed: u64,
) -> Vec<GradCheckEntry> {
    params
        .iter()
        .enumerate()
        .map(|(k, (name, m))| {
            let mut single = NamedTensors::new();
            single.insert(name.clone(), m.clone());
            let wrapped = |p: &NamedTensors| {
                let mut all = params.clone();
                all.insert(name.clone(), p[name].clone());
                loss(&all)
            };
            let report = finite_diff_check(wrapped, &single, grads, EPS, PER_TENSOR, seed + k as u64);
            GradCheckEntry {
                suite,
                backend,
                tensor: name.clone(),
                tolerance,
                report,
            }
        })
        .collect()
}

fn randomize(m: &mut Matrix, bound: f64, rng: &mut ChaCha8Rng) {
    for v in m.as_mut_slice() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Isolated refinement on a random causal spectrum with a random linear
/// read-out; the zero-initialized tensors are randomized first.
fn refine_check(backend: Backend, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let (h, w, c) = (4, 4, 8);
    let shape = AdapterShape {
        tokens: 6,
        rank: 3,
        channels: c,
        mlp_depth: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = AdapterParams::init(shape, &[true], seed)?.to_named();
    for (name, m) in params.iter_mut() {
        if name.contains("mlp2") {
            randomize(m, 0.3, &mut rng);
        }
    }
    let rows = backend.spectrum_rows(h, w);
    let causal = Matrix::from_fn(rows, c, |_, _| rng.random_range(-1.0..1.0));
    let readout = Matrix::from_fn(rows, c, |_, _| rng.random_range(-1.0..1.0));
    let record = |p: &NamedTensors, trainable: bool| -> Result<(Tape, crate::autodiff::Var)> {
        let mut tape = Tape::new();
        let vars = AdapterVars::register(&mut tape, p, 0, shape.mlp_depth, trainable)?;
        let x = tape.constant(causal.clone());
        let out = refine_on_tape(&mut tape, x, &vars);
        // the read-out skips the constant skip path so the loss stays small
        let branch = tape.add_const(out.refined, &causal.scale(-1.0));
        let loss = tape.weighted_sum(branch, readout.clone());
        Ok((tape, loss))
    };
    let (tape, loss) = record(&params, true)?;
    let grads = tape.backward(loss)?;
    let eval = |p: &NamedTensors| {
        let (t, l) = record(p, false).expect("registered above");
        t.scalar(l)
    };
    Ok(per_tensor(
        "refine",
        backend,
        REFINE_TOLERANCE,
        &params,
        &grads,
        &eval,
        seed,
    ))
}

/// Cross-entropy of the whole model on a 16×16 scene, differentiated with
/// respect to every adapter and head tensor and the embedded input tokens.
fn pipeline_check(cfg: &RunConfig, backend: Backend, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut c = cfg.clone();
    c.adapter.enabled = true;
    c.filter.backend = backend;
    let model = build_model_sized(&c, PIPELINE_IMAGE)?;
    let scene = gen_scene_sized(seed, PIPELINE_IMAGE);
    let labels = scene.labels.as_indices();
    let x0 = model.backbone.tokens(&scene.image)?;
    let grid = (x0.height(), x0.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.params.clone();
    // logits of order one keep the loss, and with it the rounding noise of
    // each evaluation, small
    let head_bound = 0.3 / model.logit_scale;
    for (name, m) in params.iter_mut() {
        if name.contains("mlp2") {
            randomize(m, 0.3, &mut rng);
        } else if name.starts_with("head") {
            randomize(m, head_bound, &mut rng);
        }
    }
    params.insert("input".into(), x0.to_matrix());
    let record = |p: &NamedTensors, trainable: bool| -> Result<(Tape, crate::autodiff::Var)> {
        let mut tape = Tape::new();
        let x = if trainable {
            tape.param("input", p["input"].clone())
        } else {
            tape.constant(p["input"].clone())
        };
        let out = model.forward_from(&mut tape, x, grid, p, trainable)?;
        let loss = tape.cross_entropy(out.logits, &labels)?;
        Ok((tape, loss))
    };
    let (tape, loss) = record(&params, true)?;
    let grads = tape.backward(loss)?;
    let eval = |p: &NamedTensors| {
        let (t, l) = record(p, false).expect("recorded above");
        t.scalar(l)
    };
    Ok(per_tensor(
        "pipeline",
        backend,
        PIPELINE_TOLERANCE,
        &params,
        &grads,
        &eval,
        seed,
    ))
}

/// Finite-difference agreement for the refinement alone and for the full
/// pipeline, on every backend.
pub fn gradcheck_suite(cfg: &RunConfig, seed: u64) -> Result<GradCheckSuite> {
    let mut entries = Vec::new();
    for backend in Backend::ALL {
        entries.extend(refine_check(backend, seed)?);
    }
    for backend in Backend::ALL {
        entries.extend(pipeline_check(cfg, backend, seed)?);
    }
    Ok(GradCheckSuite { entries })
}
