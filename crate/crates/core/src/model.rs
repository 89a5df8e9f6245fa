//! Backbone plus the semantic, panoptic and zero-shot heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::panoptic::K_CANDIDATES;
use crate::heads::{PanopticHead, SemanticHead, ZeroShotHead, HEAD_HIDDEN};
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub semantic_classes: usize,
    pub head_hidden: usize,
    /// Semantic labels treated as countable things by the panoptic head.
    pub thing_classes: Vec<usize>,
    pub k_candidates: usize,
    /// Width of the zero-shot embedding space.
    pub embed_dim: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig { backbone: BackboneConfig::toy(), semantic_classes: 4, head_hidden: 64, thing_classes: vec![1, 2, 3], k_candidates: K_CANDIDATES, embed_dim: 32 }
    }

    pub fn variant(name: &str) -> Result<Self> {
        if name == "toy" {
            return Ok(Self::toy());
        }
        Ok(ModelConfig {
            backbone: BackboneConfig::variant(name)?,
            semantic_classes: 150,
            head_hidden: HEAD_HIDDEN,
            thing_classes: Vec::new(),
            k_candidates: K_CANDIDATES,
            embed_dim: 512,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.semantic_classes == 0 || self.head_hidden == 0 || self.embed_dim == 0 || self.k_candidates == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        if self.thing_classes.iter().any(|&c| c >= self.semantic_classes) {
            return Err(Error::Config("thing class outside the semantic label range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub semantic: SemanticHead,
    pub panoptic: PanopticHead,
    pub zero_shot: ZeroShotHead,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, &cfg.backbone)?;
        let (d3, d4) = (cfg.backbone.stages[2].dim, cfg.backbone.stages[3].dim);
        let semantic = SemanticHead::new(store, "sem", d3, d4, cfg.head_hidden, cfg.semantic_classes);
        let panoptic = PanopticHead::new(store, "pan", d3, d4, cfg.head_hidden, cfg.thing_classes.len(), cfg.k_candidates);
        let zero_shot = ZeroShotHead::new(store, "zs", d4, cfg.embed_dim);
        Ok(Model { cfg: cfg.clone(), backbone, semantic, panoptic, zero_shot })
    }
}
