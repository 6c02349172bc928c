//! Run configuration: one JSON document covering training, model, data
//! and evaluation options. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::AdamConfig;
use crate::data::{generate_synthetic, load_features, Dataset, SyntheticSpec};
use crate::error::{DcaError, Result};
use crate::losses::TransformLossConfig;
use crate::networks::{ExtractorMode, NormConfig, ViewPooling, METRIC_HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    /// Last step trained at `lr_init`; decay applies after it.
    pub decay_start_step: u64,
    /// Per-step multiplicative decay after `decay_start_step`.
    pub decay_rate: f64,
    pub iter_max: u64,
    /// Steps per pretraining phase.
    pub pretrain_steps: u64,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Train only the two encoders (the separate-metric-learning baseline).
    pub encoders_only: bool,
    pub loss: TransformLossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            decay_start_step: 10_000,
            decay_rate: 0.9999,
            iter_max: 3_000,
            pretrain_steps: 500,
            classes_per_batch: 16,
            samples_per_class: 4,
            seed: 0,
            encoders_only: false,
            loss: TransformLossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DcaError::Config(format!("train: {m}")));
        if self.iter_max < 1 {
            return fail("iter_max must be >= 1");
        }
        if !(self.lr_init > 0.0) {
            return fail("lr_init must be > 0");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return fail("decay_rate must lie in (0, 1]");
        }
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return fail("classes_per_batch and samples_per_class must be >= 2");
        }
        if !(self.loss.margin > 0.0) {
            return fail("loss.margin must be > 0");
        }
        if !(self.loss.eps_log > 0.0 && self.loss.eps_log < 0.5) {
            return fail("loss.eps_log must lie in (0, 0.5)");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub extractor: ExtractorMode,
    /// Output width of a random-projection extractor.
    pub extractor_dim: usize,
    pub extractor_seed: u64,
    pub view_pooling: ViewPooling,
    pub metric_hidden: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorMode::Passthrough,
            extractor_dim: 2048,
            extractor_seed: 7,
            view_pooling: ViewPooling::Max,
            metric_hidden: METRIC_HIDDEN.to_vec(),
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn norm(&self) -> NormConfig {
        NormConfig {
            eps: self.bn_eps,
            momentum: self.bn_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metric_hidden.iter().any(|&h| h == 0) || self.extractor_dim == 0 {
            return Err(DcaError::Config("model: layer widths must be positive".into()));
        }
        if !(self.bn_eps >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(DcaError::Config("model: bn_eps must be >= 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which gallery items a query is ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GallerySplit {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub e_cutoff: usize,
    pub gallery: GallerySplit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            e_cutoff: crate::eval::E_MEASURE_CUTOFF,
            gallery: GallerySplit::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Feature file to load; when absent a synthetic dataset is generated.
    pub features: Option<PathBuf>,
    /// Seed for synthetic prototypes and noise.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.data.features.is_none() {
            self.synthetic.validate()?;
        }
        Ok(())
    }

    /// Loads `data.features`, or generates the synthetic dataset from
    /// `data.seed` when no file is configured.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data.features {
            Some(path) => load_features(path)?,
            None => generate_synthetic(&self.synthetic, &mut ChaCha8Rng::seed_from_u64(self.data.seed))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DcaError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file (defaults when `path` is `None`) and applies
    /// `key=value` overrides on dotted paths.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DcaError::io(p, e))?;
                // parse strictly first so unknown keys in the file are reported
                let parsed = Self::from_json(&text)?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| DcaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c=value` in a JSON tree. The key must already exist; the
/// value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| DcaError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| DcaError::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.train.lr_init, 1e-4);
        assert_eq!((cfg.train.classes_per_batch, cfg.train.samples_per_class), (16, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"lr_inti": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("lr_inti"));
        let err = RunConfig::load(None, &["train.nope=1".into()]).unwrap_err();
        assert!(matches!(err, DcaError::Config(ref m) if m.contains("train.nope")));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.lr_init=0.001".into(),
                "train.loss.enable_sep=false".into(),
                "model.view_pooling=mean".into(),
                "data.features=some/path.txt".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr_init, 0.001);
        assert!(!cfg.train.loss.enable_sep);
        assert_eq!(cfg.model.view_pooling, ViewPooling::Mean);
        assert_eq!(cfg.data.features, Some(PathBuf::from("some/path.txt")));
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(RunConfig::load(None, &["train.decay_rate=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["train.classes_per_batch=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.iter_max=0".into()]).is_err());
    }
}
