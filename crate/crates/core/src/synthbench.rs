//! Synthetic source-domain scenes, non-causal corruptions (the target
//! domains) and mIoU scoring.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

pub const NUM_CLASSES: usize = 4;
pub const SCENE_SIZE: usize = 64;

/// Object geometry in pixel coordinates; a pixel belongs to a shape when its
/// centre `(x + 0.5, y + 0.5)` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Infinite band `|(p − c) · n| ≤ half_width` with unit normal `n`.
    Stripe {
        cx: f64,
        cy: f64,
        nx: f64,
        ny: f64,
        half_width: f64,
    },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Stripe { .. } => 3,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Stripe {
                cx,
                cy,
                nx,
                ny,
                half_width,
            } => ((px - cx) * nx + (py - cy) * ny).abs() <= half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: Image,
    pub labels: LabelMap,
    pub seed: u64,
    /// Objects in drawing order (later objects occlude earlier ones).
    pub objects: Vec<SceneObject>,
}

const CLASS_COLORS: [[f64; 3]; 3] = [[0.85, 0.3, 0.2], [0.25, 0.7, 0.3], [0.3, 0.35, 0.85]];

fn draw_objects(rng: &mut ChaCha8Rng, size: usize) -> Vec<SceneObject> {
    let s = size as f64;
    let n = rng.random_range(2..=4);
    (0..n)
        .map(|_| {
            let kind = rng.random_range(0..3);
            let shape = match kind {
                0 => Shape::Circle {
                    cx: rng.random_range(0.15 * s..0.85 * s),
                    cy: rng.random_range(0.15 * s..0.85 * s),
                    r: rng.random_range(0.1 * s..0.22 * s),
                },
                1 => {
                    let (w, h) = (rng.random_range(0.15 * s..0.4 * s), rng.random_range(0.15 * s..0.4 * s));
                    let x0 = rng.random_range(0.0..s - w);
                    let y0 = rng.random_range(0.0..s - h);
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + w,
                        y1: y0 + h,
                    }
                }
                _ => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let n = std::f64::consts::FRAC_1_SQRT_2;
                    Shape::Stripe {
                        cx: rng.random_range(0.3 * s..0.7 * s),
                        cy: rng.random_range(0.3 * s..0.7 * s),
                        nx: n,
                        ny: sign * n,
                        half_width: rng.random_range(0.04 * s..0.08 * s),
                    }
                }
            };
            let base = CLASS_COLORS[kind];
            let color = base.map(|b| (b + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
            SceneObject { shape, color }
        })
        .collect()
}

fn rasterize(objects: &[SceneObject], rng: &mut ChaCha8Rng, size: usize) -> (Image, LabelMap) {
    let bg0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let bg1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut image = Image::filled(size, size, 0.0);
    let mut labels = vec![0u8; size * size];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // projection onto the gradient direction, mapped to [0, 1]
            let t = (((px / s - 0.5) * ca + (py / s - 0.5) * sa) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let mut color: [f64; 3] = std::array::from_fn(|c| bg0[c] * (1.0 - t) + bg1[c] * t);
            for obj in objects {
                if obj.shape.contains(px, py) {
                    color = obj.color;
                    labels[y * size + x] = obj.shape.class();
                }
            }
            for (c, v) in color.iter().enumerate() {
                let texture = rng.random_range(-0.03..0.03);
                image.set(y, x, c, (v + texture).clamp(0.0, 1.0));
            }
        }
    }
    (image, LabelMap::new(size, size, labels).expect("sized"))
}

/// Deterministic 64×64 scene for `seed`.
pub fn gen_scene(seed: u64) -> SynthScene {
    gen_scene_sized(seed, SCENE_SIZE)
}

/// Scene of arbitrary square size. Draws are repeated with a derived
/// stream until the labels contain background and at least one object.
pub fn gen_scene_sized(seed: u64, size: usize) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let objects = draw_objects(&mut rng, size);
        let (image, labels) = rasterize(&objects, &mut rng, size);
        let hist = labels.histogram(NUM_CLASSES);
        let distinct = hist.iter().filter(|&&n| n > 0).count();
        if hist[0] > 0 && distinct >= 2 {
            return SynthScene {
                image,
                labels,
                seed,
                objects,
            };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Brightness,
    Noise,
    Blur,
    Fog,
    Rain,
    Night,
    Snow,
    Reflection,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::Brightness,
        CorruptionKind::Noise,
        CorruptionKind::Blur,
        CorruptionKind::Fog,
        CorruptionKind::Rain,
        CorruptionKind::Night,
        CorruptionKind::Snow,
        CorruptionKind::Reflection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Rain => "rain",
            CorruptionKind::Night => "night",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Reflection => "reflection",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Validation(format!("unknown corruption kind '{s}'")))
    }
}

/// A non-causal perturbation with its severity parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// `clip(x + shift)`, shift in [−0.4, 0.4].
    Brightness { shift: f64 },
    /// `clip(x + N(0, σ²))`, σ in [0.02, 0.2].
    Noise { sigma: f64, seed: u64 },
    /// `k × k` box filter with edge replication; `k = 1` is the identity.
    Blur { kernel: usize },
    /// `clip((1 − α)x + α)` with α a smooth field of mean `density`.
    Fog { density: f64, seed: u64 },
    /// Anti-aliased bright streaks at a fixed angle.
    Rain { density: f64, seed: u64 },
    /// `x^γ · scale`.
    Night { gamma: f64, scale: f64 },
    /// Bright disks plus a global lift.
    Snow { density: f64, lift: f64, seed: u64 },
    /// `clip(x + w · mirror(x))`.
    Reflection { weight: f64 },
}

const RAIN_ANGLE_DEG: f64 = 75.0;

impl Corruption {
    pub fn kind(&self) -> CorruptionKind {
        match self {
            Corruption::Brightness { .. } => CorruptionKind::Brightness,
            Corruption::Noise { .. } => CorruptionKind::Noise,
            Corruption::Blur { .. } => CorruptionKind::Blur,
            Corruption::Fog { .. } => CorruptionKind::Fog,
            Corruption::Rain { .. } => CorruptionKind::Rain,
            Corruption::Night { .. } => CorruptionKind::Night,
            Corruption::Snow { .. } => CorruptionKind::Snow,
            Corruption::Reflection { .. } => CorruptionKind::Reflection,
        }
    }

    /// Severity zero: leaves every image unchanged.
    pub fn none(kind: CorruptionKind) -> Self {
        match kind {
            CorruptionKind::Brightness => Corruption::Brightness { shift: 0.0 },
            CorruptionKind::Noise => Corruption::Noise { sigma: 0.0, seed: 0 },
            CorruptionKind::Blur => Corruption::Blur { kernel: 1 },
            CorruptionKind::Fog => Corruption::Fog { density: 0.0, seed: 0 },
            CorruptionKind::Rain => Corruption::Rain { density: 0.0, seed: 0 },
            CorruptionKind::Night => Corruption::Night { gamma: 1.0, scale: 1.0 },
            CorruptionKind::Snow => Corruption::Snow {
                density: 0.0,
                lift: 0.0,
                seed: 0,
            },
            CorruptionKind::Reflection => Corruption::Reflection { weight: 0.0 },
        }
    }

    /// Severity drawn uniformly from the documented range of `kind`.
    pub fn sample(kind: CorruptionKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = rng.random();
        match kind {
            CorruptionKind::Brightness => {
                let mag = rng.random_range(0.2..0.4);
                let shift = if rng.random_bool(0.5) { mag } else { -mag };
                Corruption::Brightness { shift }
            }
            CorruptionKind::Noise => Corruption::Noise {
                sigma: rng.random_range(0.05..0.2),
                seed: inner,
            },
            CorruptionKind::Blur => Corruption::Blur {
                kernel: [3, 5, 7][rng.random_range(0..3)],
            },
            CorruptionKind::Fog => Corruption::Fog {
                density: rng.random_range(0.2..0.6),
                seed: inner,
            },
            CorruptionKind::Rain => Corruption::Rain {
                density: rng.random_range(0.4..1.0),
                seed: inner,
            },
            CorruptionKind::Night => Corruption::Night {
                gamma: rng.random_range(1.5..2.5),
                scale: rng.random_range(0.3..0.6),
            },
            CorruptionKind::Snow => Corruption::Snow {
                density: rng.random_range(0.4..1.0),
                lift: rng.random_range(0.05..0.2),
                seed: inner,
            },
            CorruptionKind::Reflection => Corruption::Reflection {
                weight: rng.random_range(0.1..0.3),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("invalid {what} for {}", self.kind())));
        match *self {
            Corruption::Brightness { shift } if !shift.is_finite() => bad("shift"),
            Corruption::Noise { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => bad("sigma"),
            Corruption::Blur { kernel } if kernel == 0 || kernel % 2 == 0 => bad("kernel size"),
            Corruption::Fog { density, .. } if !(0.0..=1.0).contains(&density) => bad("density"),
            Corruption::Rain { density, .. } | Corruption::Snow { density, .. }
                if !(density >= 0.0 && density.is_finite()) =>
            {
                bad("density")
            }
            Corruption::Night { gamma, scale } if !(gamma > 0.0 && scale >= 0.0) => bad("gamma/scale"),
            Corruption::Reflection { weight } if !(weight >= 0.0 && weight.is_finite()) => bad("weight"),
            _ => Ok(()),
        }
    }
}

/// Applies `c` to a copy of `image`; the result is clipped to `[0, 1]`.
pub fn corrupt(image: &Image, c: &Corruption) -> Result<Image> {
    c.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    match *c {
        Corruption::Brightness { shift } => {
            for v in out.data_mut() {
                *v += shift;
            }
        }
        Corruption::Noise { sigma, seed } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("sigma checked");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for v in out.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        Corruption::Blur { kernel } => {
            if kernel > 1 {
                out = box_blur(image, kernel);
            }
        }
        Corruption::Fog { density, seed } => {
            if density > 0.0 {
                let field = smooth_field(h, w, seed);
                for y in 0..h {
                    for x in 0..w {
                        let alpha = (density * (1.0 + 0.5 * field[y * w + x])).clamp(0.0, 1.0);
                        for ch in 0..3 {
                            let v = out.get(y, x, ch);
                            out.set(y, x, ch, (1.0 - alpha) * v + alpha);
                        }
                    }
                }
            }
        }
        Corruption::Rain { density, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = (density * (h * w) as f64 / 40.0).round() as usize;
            let (dx, dy) = (RAIN_ANGLE_DEG.to_radians().cos(), RAIN_ANGLE_DEG.to_radians().sin());
            for _ in 0..count {
                let len = rng.random_range(6.0..12.0);
                let x0 = rng.random_range(0.0..w as f64);
                let y0 = rng.random_range(-len..h as f64);
                let bright = rng.random_range(0.3..0.6);
                add_segment(&mut out, (x0, y0), (x0 + dx * len, y0 + dy * len), 0.8, bright);
            }
        }
        Corruption::Night { gamma, scale } => {
            for v in out.data_mut() {
                *v = v.powf(gamma) * scale;
            }
        }
        Corruption::Snow { density, lift, seed } => {
            for v in out.data_mut() {
                *v += lift;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = (density * (h * w) as f64 / 60.0).round() as usize;
            for _ in 0..count {
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                let r = rng.random_range(0.7..1.8);
                let bright = rng.random_range(0.5..0.9);
                add_disk(&mut out, cx, cy, r, bright);
            }
        }
        Corruption::Reflection { weight } => {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = out.get(y, x, ch) + weight * image.get(y, w - 1 - x, ch);
                        out.set(y, x, ch, v);
                    }
                }
            }
        }
    }
    out.clip();
    Ok(out)
}

fn box_blur(image: &Image, k: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let r = (k / 2) as isize;
    let mut out = image.clone();
    let norm = (k * k) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for oy in -r..=r {
                    for ox in -r..=r {
                        let yy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                        acc += image.get(yy, xx, ch);
                    }
                }
                out.set(y, x, ch, acc / norm);
            }
        }
    }
    out
}

/// Sum of three low-frequency cosines, scaled into `[−1, 1]`.
fn smooth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.5..2.0) / h as f64;
            let fx = rng.random_range(0.5..2.0) / w as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fy, fx, phase)
        })
        .collect();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).cos())
                .sum();
            field.push(v / 3.0);
        }
    }
    field
}

fn add_segment(img: &mut Image, a: (f64, f64), b: (f64, f64), width: f64, bright: f64) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let ymin = (a.1.min(b.1) - width).floor().max(0.0) as isize;
    let ymax = ((a.1.max(b.1) + width).ceil() as isize).min(h - 1);
    let xmin = (a.0.min(b.0) - width).floor().max(0.0) as isize;
    let xmax = ((a.0.max(b.0) + width).ceil() as isize).min(w - 1);
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0);
            let d = ((px - a.0 - t * vx).powi(2) + (py - a.1 - t * vy).powi(2)).sqrt();
            let cover = (1.0 - d / width).max(0.0);
            if cover > 0.0 {
                for ch in 0..3 {
                    let v = img.get(y as usize, x as usize, ch);
                    img.set(y as usize, x as usize, ch, v + bright * cover);
                }
            }
        }
    }
}

fn add_disk(img: &mut Image, cx: f64, cy: f64, r: f64, bright: f64) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let y0 = ((cy - r - 1.0).floor() as isize).max(0);
    let y1 = ((cy + r + 1.0).ceil() as isize).min(h - 1);
    let x0 = ((cx - r - 1.0).floor() as isize).max(0);
    let x1 = ((cx + r + 1.0).ceil() as isize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                for ch in 0..3 {
                    let v = img.get(y as usize, x as usize, ch);
                    img.set(y as usize, x as usize, ch, v + bright * cover);
                }
            }
        }
    }
}

/// Per-class intersection-over-union over a whole evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct IouSummary {
    /// `None` where the class never occurs in prediction or ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Accumulates intersection and union counts per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Validation(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Validation(format!(
                    "label {} out of range for {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> IouSummary {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouSummary { per_class, miou }
    }
}

/// mIoU of a single prediction.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<IouSummary> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Validation("prediction and ground truth differ in shape".into()));
    }
    let mut acc = IouAccumulator::new(classes);
    acc.add(pred.data(), gt.data())?;
    Ok(acc.summary())
}

/// Anything that maps an image to per-pixel labels.
pub trait Segmenter: Sync {
    fn classes(&self) -> usize;
    fn predict(&self, image: &Image) -> Result<LabelMap>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainScore {
    pub domain: String,
    pub summary: IouSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Clean domain first, then one entry per corruption in suite order.
    pub domains: Vec<DomainScore>,
    /// Scenes evaluated per domain.
    pub samples: usize,
}

impl EvalReport {
    pub fn domain(&self, name: &str) -> Option<&IouSummary> {
        self.domains.iter().find(|d| d.domain == name).map(|d| &d.summary)
    }

    pub fn clean_miou(&self) -> f64 {
        self.domain("clean").map_or(f64::NAN, |s| s.miou)
    }

    /// Mean mIoU over the corrupted domains.
    pub fn corrupted_average(&self) -> f64 {
        let vals: Vec<f64> = self
            .domains
            .iter()
            .filter(|d| d.domain != "clean")
            .map(|d| d.summary.miou)
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// `domain,class,iou`; absent classes are written as `nan`.
    pub fn write_class_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "domain,class,iou")?;
        for d in &self.domains {
            for (k, iou) in d.summary.per_class.iter().enumerate() {
                match iou {
                    Some(v) => writeln!(out, "{},{k},{v}", d.domain)?,
                    None => writeln!(out, "{},{k},nan", d.domain)?,
                }
            }
        }
        Ok(())
    }

    /// `domain,miou`
    pub fn write_miou_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "domain,miou")?;
        for d in &self.domains {
            writeln!(out, "{},{}", d.domain, d.summary.miou)?;
        }
        Ok(())
    }
}

/// Seed for the corruption applied to scene `scene_seed` in domain `kind`.
pub fn corruption_seed(scene_seed: u64, kind: CorruptionKind) -> u64 {
    scene_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((kind as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Scores `model` on `n_scenes` held-out scenes, clean and under each
/// corruption of `suite`. Scene seeds are `eval_seed..eval_seed + n_scenes`
/// and must not intersect `train_seeds`.
pub fn evaluate(
    model: &dyn Segmenter,
    suite: &[CorruptionKind],
    n_scenes: usize,
    eval_seed: u64,
    train_seeds: Range<u64>,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::Config("corruption suite is empty".into()));
    }
    let eval_seeds = eval_seed..eval_seed + n_scenes as u64;
    if eval_seeds.start < train_seeds.end && train_seeds.start < eval_seeds.end {
        return Err(Error::Config(format!(
            "evaluation seeds {eval_seeds:?} overlap training seeds {train_seeds:?}"
        )));
    }
    let classes = model.classes();
    let per_scene: Vec<Vec<(Vec<u8>, Vec<u8>)>> = eval_seeds
        .into_par_iter()
        .map(|seed| -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
            let scene = gen_scene(seed);
            let mut out = Vec::with_capacity(suite.len() + 1);
            let clean = model.predict(&scene.image)?;
            out.push((clean.data().to_vec(), scene.labels.data().to_vec()));
            for &kind in suite {
                let c = Corruption::sample(kind, corruption_seed(seed, kind));
                let img = corrupt(&scene.image, &c)?;
                let pred = model.predict(&img)?;
                out.push((pred.data().to_vec(), scene.labels.data().to_vec()));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = std::iter::once("clean".to_string())
        .chain(suite.iter().map(|k| k.name().to_string()))
        .collect();
    let mut accs = vec![IouAccumulator::new(classes); names.len()];
    for scene in &per_scene {
        for (acc, (pred, gt)) in accs.iter_mut().zip(scene) {
            acc.add(pred, gt)?;
        }
    }
    Ok(EvalReport {
        domains: names
            .into_iter()
            .zip(accs)
            .map(|(domain, acc)| DomainScore {
                domain,
                summary: acc.summary(),
            })
            .collect(),
        samples: n_scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_multiclass() {
        for seed in 0..40 {
            let a = gen_scene(seed);
            assert_eq!(a, gen_scene(seed));
            let hist = a.labels.histogram(NUM_CLASSES);
            assert!(hist[0] > 0);
            assert!(hist.iter().filter(|&&n| n > 0).count() >= 2);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_severity_is_identity() {
        let scene = gen_scene(3);
        for kind in CorruptionKind::ALL {
            let out = corrupt(&scene.image, &Corruption::none(kind)).unwrap();
            assert_eq!(out, scene.image, "{kind}");
        }
    }

    #[test]
    fn brightness_on_constant_image() {
        let img = Image::filled(8, 8, 0.5);
        let out = corrupt(&img, &Corruption::Brightness { shift: 0.2 }).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn noise_statistics_within_three_standard_errors() {
        // Centre far from the clipping bounds so the pre-clip field is visible.
        let img = Image::filled(64, 64, 0.5);
        let out = corrupt(&img, &Corruption::Noise { sigma: 0.1, seed: 11 }).unwrap();
        let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!(mean.abs() <= 3.0 * 0.1 / n.sqrt(), "mean {mean}");
        // standard error of the sample std ≈ σ / √(2n)
        assert!((std - 0.1).abs() <= 3.0 * 0.1 / (2.0 * n).sqrt(), "std {std}");
    }

    #[test]
    fn every_kind_changes_pixels_only() {
        let scene = gen_scene(5);
        for kind in CorruptionKind::ALL {
            let c = Corruption::sample(kind, 99);
            let out = corrupt(&scene.image, &c).unwrap();
            assert_ne!(out, scene.image, "{kind}");
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("hail".parse::<CorruptionKind>(), Err(Error::Validation(_))));
        assert!(matches!(
            corrupt(&Image::filled(4, 4, 0.5), &Corruption::Blur { kernel: 4 }),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn miou_worked_example() {
        let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let s = miou(&pred, &gt, 2).unwrap();
        assert_eq!(s.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((s.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn miou_extremes() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(miou(&gt, &gt, 4).unwrap().miou, 1.0);
        let pred = LabelMap::new(2, 2, vec![1, 0, 3, 2]).unwrap();
        assert_eq!(miou(&pred, &gt, 4).unwrap().miou, 0.0);
        let bad = LabelMap::new(2, 2, vec![0, 1, 2, 4]).unwrap();
        assert!(matches!(miou(&bad, &gt, 4), Err(Error::Validation(_))));
    }

    #[test]
    fn absent_classes_excluded() {
        let gt = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let s = miou(&gt, &gt, 4).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), None, None, None]);
        assert_eq!(s.miou, 1.0);
    }

    struct Constant;

    impl Segmenter for Constant {
        fn classes(&self) -> usize {
            NUM_CLASSES
        }

        fn predict(&self, image: &Image) -> Result<LabelMap> {
            LabelMap::new(image.height(), image.width(), vec![0; image.height() * image.width()])
        }
    }

    #[test]
    fn evaluation_seed_overlap_rejected() {
        let r = evaluate(&Constant, &[CorruptionKind::Noise], 10, 5, 0..8);
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(evaluate(&Constant, &[CorruptionKind::Noise], 2, 8, 0..8).is_ok());
        assert!(matches!(evaluate(&Constant, &[], 2, 8, 0..8), Err(Error::Config(_))));
    }

    #[test]
    fn constant_background_prediction_closed_form() {
        let n = 6;
        let report = evaluate(&Constant, &[CorruptionKind::Fog], n, 1000, 0..200).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        for seed in 1000..1000 + n as u64 {
            for (h, c) in hist.iter_mut().zip(gen_scene(seed).labels.histogram(NUM_CLASSES)) {
                *h += c;
            }
        }
        let total: usize = hist.iter().sum();
        let present = hist.iter().filter(|&&c| c > 0).count() as f64;
        let expected = (hist[0] as f64 / total as f64) / present;
        for d in &report.domains {
            assert!((d.summary.miou - expected).abs() < 1e-12, "{}", d.domain);
        }
    }
}
