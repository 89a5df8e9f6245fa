//! Run configuration: a JSON document plus command-line overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use nsvt_core::backbone::GroupingKind;
use nsvt_core::grouping::{Path, DEFAULT_EPS};
use nsvt_core::model::ModelConfig;
use nsvt_core::train::Task;
use nsvt_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Sparse,
    Reference,
}

/// Per-downsampler grouping switches; a disabled stage falls back to a
/// strided convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub s1: bool,
    pub s2: bool,
    pub dense_s3: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { s1: true, s2: true, dense_s3: true }
    }
}

impl StageToggles {
    pub fn all_off() -> Self {
        StageToggles { s1: false, s2: false, dense_s3: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub n_train: usize,
    pub image_size: usize,
    pub max_shapes: usize,
    pub data_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { steps: 2000, batch: 8, lr: 1e-3, warmup: 0, n_train: 512, image_size: 64, max_shapes: 3, data_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Input token-grid sides of the benchmarked local grouping layer.
    pub sides: Vec<usize>,
    pub runs: usize,
    pub d_in: usize,
    pub iterations: usize,
    /// Run in 32-bit instead of 64-bit.
    pub f32: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { sides: vec![32, 64, 128], runs: 5, d_in: 32, iterations: 3, f32: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named preset; ignored when `model` is given.
    pub variant: Option<String>,
    pub model: Option<ModelConfig>,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub task: Task,
    pub out: PathBuf,
    pub eps: f64,
    pub path: PathKind,
    pub grouping: StageToggles,
    pub train: TrainSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Some("toy".into()),
            model: None,
            seed: 0,
            weights: None,
            embeddings: None,
            task: Task::Semantic,
            out: PathBuf::from("out"),
            eps: DEFAULT_EPS,
            path: PathKind::Sparse,
            grouping: StageToggles::default(),
            train: TrainSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn grouping_path(&self) -> Result<Path> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be finite and non-negative, got {}", self.eps)));
        }
        Ok(match self.path {
            PathKind::Sparse => Path::Sparse { eps: self.eps },
            PathKind::Reference => Path::Reference,
        })
    }

    /// Preset or explicit model with the stage toggles applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match (&self.model, &self.variant) {
            (Some(m), _) => m.clone(),
            (None, Some(v)) => ModelConfig::variant(v)?,
            (None, None) => return Err(Error::Config("config needs a variant or an explicit model".into())),
        };
        let on = [self.grouping.s1, self.grouping.s2, self.grouping.dense_s3];
        for (kind, on) in m.backbone.grouping.iter_mut().zip(on) {
            if !on {
                *kind = GroupingKind::Off;
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"seeed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"grouping": {"s4": false}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"step": 3}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn toggles_switch_stages_off() {
        let c = RunConfig { grouping: StageToggles { s1: false, s2: true, dense_s3: false }, ..Default::default() };
        let g = c.model_config().unwrap().backbone.grouping;
        assert_eq!(g, [GroupingKind::Off, GroupingKind::Local, GroupingKind::Off]);
    }

    #[test]
    fn explicit_model_wins() {
        let mut m = ModelConfig::toy();
        m.semantic_classes = 7;
        let c = RunConfig { model: Some(m.clone()), ..Default::default() };
        assert_eq!(c.model_config().unwrap(), m);
        assert!(RunConfig { variant: Some("huge".into()), ..Default::default() }.model_config().is_err());
        assert!(RunConfig { eps: -1.0, ..Default::default() }.grouping_path().is_err());
    }
}
