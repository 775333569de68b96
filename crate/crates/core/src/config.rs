//! Run configuration in TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::backbone::{BackboneConfig, DEFAULT_LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::filtering::FilterConfig;
use crate::synthbench::{CorruptionKind, NUM_CLASSES, SCENE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// `false` trains the head alone on the frozen backbone.
    pub enabled: bool,
    /// Token count `m`.
    pub tokens: usize,
    /// Factor rank `r`.
    pub rank: usize,
    pub mlp_depth: usize,
    /// Per-layer switch; empty means every layer.
    pub layers: Vec<bool>,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tokens: 16,
            rank: 4,
            mlp_depth: 1,
            layers: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Fixed multiplier on the logits of the normalized-feature head.
    pub logit_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectorConfig {
    /// Artifact magnitude as a multiple of the clean feature RMS; 0 disables.
    pub scale: f64,
    /// 1-based layer indices.
    pub layers: Vec<usize>,
    pub tokens: usize,
    pub seed: u64,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        Self {
            scale: 4.0,
            layers: vec![3, 4],
            tokens: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub scenes: usize,
    /// First training scene seed; scenes use `scene_seed..scene_seed + scenes`.
    pub scene_seed: u64,
    /// Batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            scenes: 200,
            scene_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub scene_seed: u64,
    pub suite: Vec<CorruptionKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 50,
            scene_seed: 100_000,
            suite: vec![
                CorruptionKind::Noise,
                CorruptionKind::Fog,
                CorruptionKind::Night,
                CorruptionKind::Rain,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub classes: usize,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub adapter: AdapterConfig,
    pub filter: FilterConfig,
    pub injector: InjectorConfig,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: NUM_CLASSES,
            image_size: SCENE_SIZE,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            adapter: AdapterConfig::default(),
            filter: FilterConfig::default(),
            injector: InjectorConfig::default(),
            optimizer: AdamWConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Per-layer adapter switches expanded to the backbone depth.
    pub fn adapter_layers(&self) -> Result<Vec<bool>> {
        let n = self.backbone.layers;
        if self.adapter.layers.is_empty() {
            Ok(vec![true; n])
        } else if self.adapter.layers.len() == n {
            Ok(self.adapter.layers.clone())
        } else {
            Err(Error::Config(format!(
                "adapter.layers lists {} layers, backbone has {n}",
                self.adapter.layers.len()
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.backbone.validate()?;
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.classes > NUM_CLASSES {
            return bad(format!(
                "the benchmark has {NUM_CLASSES} classes, config asks for {}",
                self.classes
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.backbone.patch) {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.backbone.patch
            ));
        }
        self.adapter_layers()?;
        if !(self.head.logit_scale > 0.0 && self.head.logit_scale.is_finite()) {
            return bad(format!(
                "head.logit_scale must be positive, got {}",
                self.head.logit_scale
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer needs lr > 0, eps > 0 and betas in [0, 1)".into());
        }
        if o.weight_decay < 0.0 || o.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("weight decay must be >= 0 and clip norm > 0".into());
        }
        if self.train.batch == 0 || self.train.scenes == 0 {
            return bad("train.batch and train.scenes must be positive".into());
        }
        if self.eval.suite.is_empty() {
            return bad("eval.suite is empty".into());
        }
        if self.injector.scale < 0.0 || self.injector.layers.iter().any(|&l| l == 0 || l > self.backbone.layers) {
            return bad("injector layers must be 1-based backbone layers and scale >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::FilterMode;
    use crate::spectral::Backend;

    #[test]
    fn text_roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.filter.rl = 0.15;
        cfg.filter.mode = FilterMode::RemoveHighOnly;
        cfg.filter.backend = Backend::Haar;
        cfg.adapter.layers = vec![true, false, true, true];
        cfg.optimizer.clip_norm = Some(1.5);
        cfg.eval.suite = vec![CorruptionKind::Snow];
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml("[filter]\nrl = 0.1\n").unwrap();
        assert_eq!(cfg.filter.rl, 0.1);
        assert_eq!(cfg.filter.rh, 0.7);
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.train.steps, 300);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "classes = 4\nimage_size = 64\nbogus = 1\n",
            "classes = 4\nimage_size = 64\n[filter]\nr_l = 0.1\n",
            "classes = 4\nimage_size = 64\n[optimizer]\nlearning_rate = 0.1\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig {
            image_size: 60,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.adapter.layers = vec![true];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
