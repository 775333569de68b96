//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and accumulates
//! adjoints. Leaves created with [`Tape::param`] are trainable and receive a
//! named gradient entry; [`Tape::constant`] leaves (frozen weights, inputs)
//! do not, and subgraphs that only depend on constants are skipped.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::spectral::{self, Backend};
use crate::tensor::{dot, Matrix};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

/// Trainable-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Matrix> {
        self.0
    }

    pub fn from_map(map: BTreeMap<String, Matrix>) -> Self {
        Self(map)
    }

    /// Adds `other` entry-wise; both must cover the same names.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, Vec<f64>),
    AddConst(usize),
    Scale(usize, f64),
    Softmax(usize),
    LayerNorm(usize, Vec<f64>),
    Gelu(usize),
    Spectral {
        x: usize,
        backend: Backend,
        h: usize,
        w: usize,
    },
    InvSpectral {
        x: usize,
        backend: Backend,
        h: usize,
        w: usize,
    },
    Upsample {
        x: usize,
        gh: usize,
        gw: usize,
        p: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Matrix,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: usize,
        weights: Matrix,
    },
    SumSq(usize),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v.idx));
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::MatMul(ia, ib), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.matmul_t(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::MatMulT(ia, ib), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.add(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Add(ia, ib), rg)
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.nodes[ia].value.add_row_broadcast(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::AddRow(ia, ib), rg)
    }

    /// Multiplies every row of `a` elementwise by the `1 × cols` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let row = &self.nodes[ib].value;
        let src = &self.nodes[ia].value;
        assert_eq!((1, src.cols()), row.shape(), "mul_row shape");
        let mut value = src.clone();
        for i in 0..value.rows() {
            for (o, &g) in value.row_mut(i).iter_mut().zip(row.as_slice()) {
                *o *= g;
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::MulRow(ia, ib), rg)
    }

    /// Multiplies row `i` of `a` by the constant `gains[i]`.
    pub fn scale_rows(&mut self, a: Var, gains: Vec<f64>) -> Var {
        let ia = self.idx(a);
        let src = &self.nodes[ia].value;
        assert_eq!(src.rows(), gains.len(), "scale_rows length");
        let mut value = src.clone();
        for (i, &g) in gains.iter().enumerate() {
            for o in value.row_mut(i) {
                *o *= g;
            }
        }
        let rg = self.rg(ia);
        self.push(value, Op::ScaleRows(ia, gains), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.add(c);
        let rg = self.rg(ia);
        self.push(value, Op::AddConst(ia), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.scale(s);
        let rg = self.rg(ia);
        self.push(value, Op::Scale(ia, s), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = softmax_rows(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push(value, Op::Softmax(ia), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ia = self.idx(a);
        let src = &self.nodes[ia].value;
        let c = src.cols() as f64;
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(ia);
        self.push(value, Op::LayerNorm(ia, inv_std), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.map(gelu);
        let rg = self.rg(ia);
        self.push(value, Op::Gelu(ia), rg)
    }

    /// Forward frequency transform of a `(h·w) × c` spatial matrix.
    pub fn spectral(&mut self, a: Var, backend: Backend, h: usize, w: usize) -> Var {
        let ia = self.idx(a);
        let value = spectral::forward_rows(backend, &self.nodes[ia].value, h, w);
        let rg = self.rg(ia);
        self.push(value, Op::Spectral { x: ia, backend, h, w }, rg)
    }

    pub fn inverse_spectral(&mut self, a: Var, backend: Backend, h: usize, w: usize) -> Var {
        let ia = self.idx(a);
        let value = spectral::inverse_rows(backend, &self.nodes[ia].value, h, w);
        let rg = self.rg(ia);
        self.push(value, Op::InvSpectral { x: ia, backend, h, w }, rg)
    }

    /// Nearest-neighbour upsampling of a `(gh·gw) × k` grid by factor `p`.
    pub fn upsample(&mut self, a: Var, gh: usize, gw: usize, p: usize) -> Var {
        let ia = self.idx(a);
        let value = upsample_nearest(&self.nodes[ia].value, gh, gw, p);
        let rg = self.rg(ia);
        self.push(value, Op::Upsample { x: ia, gh, gw, p }, rg)
    }

    /// Mean pixel cross-entropy of `logits` (`P × K`) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits);
        let z = &self.nodes[il].value;
        if z.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} logit rows for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let probs = softmax_rows(z);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(il);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: il,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ weights ⊙ a` as a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Var {
        let ia = self.idx(a);
        let value = dot(self.nodes[ia].value.as_slice(), weights.as_slice());
        let rg = self.rg(ia);
        self.push(Matrix::filled(1, 1, value), Op::WeightedSum { x: ia, weights }, rg)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.norm_sq();
        let rg = self.rg(ia);
        self.push(Matrix::filled(1, 1, value), Op::SumSq(ia), rg)
    }

    /// Reverse sweep from a scalar `loss`. Returns one entry per registered
    /// parameter (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        let root = loss.idx;
        if self.nodes[root].value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::Usage("loss does not depend on any trainable parameter".into()));
        }
        let mut adj: Vec<Option<Matrix>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }
        let mut out = BTreeMap::new();
        for (name, idx) in &self.params {
            let g = adj.get(*idx).and_then(|g| g.clone()).unwrap_or_else(|| {
                let (r, c) = self.nodes[*idx].value.shape();
                Matrix::zeros(r, c)
            });
            if let Some(existing) = out.insert(name.clone(), g) {
                // same name registered twice: sum contributions
                let slot = out.get_mut(name).unwrap();
                slot.add_assign(&existing);
            }
        }
        Ok(Gradients(out))
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let send = |j: usize, d: Matrix, adj: &mut [Option<Matrix>]| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut adj[j] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_t(val(*b)), adj);
                }
                if self.rg(*b) {
                    send(*b, val(*a).t_matmul(g), adj);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul(val(*b)), adj);
                }
                if self.rg(*b) {
                    send(*b, g.t_matmul(val(*a)), adj);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.clone(), adj);
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone(), adj);
                if self.rg(*b) {
                    send(*b, g.sum_rows(), adj);
                }
            }
            Op::MulRow(a, b) => {
                let row = val(*b);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (o, &s) in d.row_mut(r).iter_mut().zip(row.as_slice()) {
                            *o *= s;
                        }
                    }
                    send(*a, d, adj);
                }
                if self.rg(*b) {
                    send(*b, g.hadamard(val(*a)).sum_rows(), adj);
                }
            }
            Op::ScaleRows(a, gains) => {
                let mut d = g.clone();
                for (r, &s) in gains.iter().enumerate() {
                    for o in d.row_mut(r) {
                        *o *= s;
                    }
                }
                send(*a, d, adj);
            }
            Op::AddConst(a) => send(*a, g.clone(), adj),
            Op::Scale(a, s) => send(*a, g.scale(*s), adj),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yv * (gv - s);
                    }
                }
                send(*a, d, adj);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for (r, &istd) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = dot(gr, yr) / c;
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = istd * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*a, d, adj);
            }
            Op::Gelu(a) => send(*a, val(*a).zip_map(g, |x, gv| gelu_grad(x) * gv), adj),
            Op::Spectral { x, backend, h, w } => send(*x, spectral::inverse_rows(*backend, g, *h, *w), adj),
            Op::InvSpectral { x, backend, h, w } => send(*x, spectral::forward_rows(*backend, g, *h, *w), adj),
            Op::Upsample { x, gh, gw, p } => {
                let k = g.cols();
                let mut d = Matrix::zeros(gh * gw, k);
                let width = gw * p;
                for y in 0..gh * p {
                    for xx in 0..width {
                        let cell = (y / p) * gw + xx / p;
                        for (o, &gv) in d.row_mut(cell).iter_mut().zip(g.row(y * width + xx)) {
                            *o += gv;
                        }
                    }
                }
                send(*x, d, adj);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let scale = g[(0, 0)] / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[(r, l)] -= 1.0;
                }
                send(*logits, d.scale(scale), adj);
            }
            Op::WeightedSum { x, weights } => send(*x, weights.scale(g[(0, 0)]), adj),
            Op::SumSq(a) => send(*a, val(*a).scale(2.0 * g[(0, 0)]), adj),
        }
    }
}

pub(crate) fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn upsample_nearest(m: &Matrix, gh: usize, gw: usize, p: usize) -> Matrix {
    assert_eq!(m.rows(), gh * gw, "upsample grid size");
    let k = m.cols();
    let width = gw * p;
    let mut out = Matrix::zeros(gh * p * width, k);
    for y in 0..gh * p {
        for x in 0..width {
            let cell = (y / p) * gw + x / p;
            out.row_mut(y * width + x).copy_from_slice(m.row(cell));
        }
    }
    out
}
