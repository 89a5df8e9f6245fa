use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub attn_window: usize,
}

impl StageConfig {
    pub fn heads(&self) -> usize {
        (self.dim / 32).max(1)
    }
}

/// Downsampler between consecutive stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingKind {
    Local,
    Dense,
    /// Strided convolution with a fixed bilinear correspondence.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: String,
    pub stages: [StageConfig; 4],
    pub grouping: [GroupingKind; 3],
    pub iterations: usize,
    /// Largest image side the model is built for; sizes the dense bias table.
    pub image_size: usize,
    pub in_chans: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    fn uniform(variant: &str, dims: [usize; 4], depths: [usize; 4], mlp_ratio: f64, image_size: usize, num_classes: usize) -> Self {
        let st = |i: usize| StageConfig { depth: depths[i], dim: dims[i], mlp_ratio, attn_window: 7 };
        BackboneConfig {
            variant: variant.into(),
            stages: [st(0), st(1), st(2), st(3)],
            grouping: [GroupingKind::Local, GroupingKind::Local, GroupingKind::Dense],
            iterations: 3,
            image_size,
            in_chans: 3,
            num_classes,
        }
    }

    pub fn tiny() -> Self {
        Self::uniform("tiny", [64, 128, 256, 512], [3, 4, 18, 5], 3.0, 224, 1000)
    }

    pub fn base() -> Self {
        Self::uniform("base", [128, 256, 512, 1024], [3, 4, 18, 5], 2.0, 224, 1000)
    }

    pub fn large() -> Self {
        Self::uniform("large", [192, 384, 768, 1536], [3, 4, 18, 5], 2.0, 224, 1000)
    }

    pub fn toy() -> Self {
        Self::uniform("toy", [8, 16, 32, 64], [1, 1, 1, 1], 2.0, 64, 4)
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.dim == 0 || s.attn_window == 0 || s.mlp_ratio <= 0.0 {
                return Err(Error::Config(format!("stage {} needs positive depth, dim, window and mlp ratio", i + 1)));
            }
            if s.dim % s.heads() != 0 {
                return Err(Error::Config(format!("stage {} dim {} not divisible by {} heads", i + 1, s.dim, s.heads())));
            }
        }
        for i in 0..3 {
            if self.stages[i + 1].dim != 2 * self.stages[i].dim {
                return Err(Error::Config(format!("stage {} dim must double stage {}", i + 2, i + 1)));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("grouping iterations must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.in_chans == 0 {
            return Err(Error::Config("in_chans must be positive".into()));
        }
        Ok(())
    }

    /// Stage `i` (1-based) grid for an `h × w` image.
    pub fn stage_grid(h: usize, w: usize, stage: usize) -> (usize, usize) {
        (h >> (stage + 1), w >> (stage + 1))
    }
}
