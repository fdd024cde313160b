//! Run configuration shared by the pipeline and the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::Variant;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::features::{FeatureConfig, DEFAULT_EMBED_DIM, DEFAULT_MASK_GRID};
use crate::io;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding size `D`.
    pub embed_dim: usize,
    /// Number of primitives `K`.
    pub primitives: usize,
    pub variant: Variant,
    pub use_motion: bool,
    pub use_mask: bool,
    pub use_language: bool,
    pub mask_grid: usize,
    /// Width of each category embedding in the language channel.
    pub class_embed_dim: usize,
    /// External per-frame channels as (name, dim).
    pub external: Vec<(String, usize)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 512,
            primitives: 64,
            variant: Variant::Literal,
            use_motion: true,
            use_mask: false,
            use_language: true,
            mask_grid: DEFAULT_MASK_GRID,
            class_embed_dim: DEFAULT_EMBED_DIM,
            external: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn features(&self, num_classes: usize) -> Result<FeatureConfig> {
        let mut f = FeatureConfig::new(
            self.use_motion,
            self.use_mask,
            self.use_language,
            self.mask_grid,
            num_classes,
            &self.external,
        )?;
        f.embed_dim = self.class_embed_dim;
        f.validate()?;
        Ok(f)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: RunConfig = io::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.embed_dim == 0 || self.model.primitives == 0 {
            return Err(Error::invalid("model: embed_dim and primitives must be positive"));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }
}
