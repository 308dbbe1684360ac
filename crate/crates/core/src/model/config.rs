use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 32,
            heads: 2,
            depth: 2,
            mlp_ratio: 4.0,
        }
    }
}

/// Shape of the frozen ViT, its prompt encoder and the mask decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub corner_embed_dim: usize,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 64,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            corner_embed_dim: 96,
            decoder: DecoderConfig::default(),
        }
    }
}

fn hidden(dim: usize, ratio: f64) -> usize {
    ((dim as f64) * ratio).round() as usize
}

impl ModelConfig {
    /// 16×16 toy shape small enough for element-wise finite differences.
    pub fn toy() -> Self {
        ModelConfig {
            img_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            corner_embed_dim: 8,
            decoder: DecoderConfig {
                dim: 8,
                heads: 2,
                depth: 1,
                mlp_ratio: 2.0,
            },
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        hidden(self.embed_dim, self.mlp_ratio)
    }

    pub fn decoder_mlp_hidden(&self) -> usize {
        hidden(self.decoder.dim, self.decoder.mlp_ratio)
    }

    /// Side of the decoder's native output map.
    pub fn decoder_resolution(&self) -> usize {
        self.grid() * 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.decoder;
        if self.img_size == 0 || self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return bad(format!(
                "img_size {} must be a positive multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must divide into {} heads", self.embed_dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.corner_embed_dim == 0 || self.corner_embed_dim % 2 != 0 {
            return bad(format!("corner_embed_dim {} must be even", self.corner_embed_dim));
        }
        if d.dim < 8 || d.dim % 8 != 0 {
            return bad(format!("decoder dim {} must be a positive multiple of 8", d.dim));
        }
        if d.heads == 0 || d.dim % d.heads != 0 || d.depth == 0 {
            return bad(format!("decoder dim {} / heads {} / depth {}", d.dim, d.heads, d.depth));
        }
        if !(self.mlp_ratio > 0.0 && d.mlp_ratio > 0.0) || self.mlp_hidden() == 0 || self.decoder_mlp_hidden() == 0 {
            return bad("mlp ratios must be positive".into());
        }
        Ok(())
    }
}

/// Attention projection an adapter can wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    Proj,
}

/// Where adapters go and what they look like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub rates: Vec<usize>,
    /// Projections adapted in every selected block.
    pub targets: Vec<Target>,
    /// Encoder blocks that receive adapters; `None` means all.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    /// Atrous attention in the bottleneck; off gives a plain pass-through.
    #[serde(default = "yes")]
    pub attention: bool,
}

fn yes() -> bool {
    true
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            rates: vec![1, 6, 12, 18],
            targets: vec![Target::Q, Target::V],
            blocks: None,
            attention: true,
        }
    }
}

impl AdapterConfig {
    pub fn applies(&self, block: usize, target: Target) -> bool {
        self.targets.contains(&target) && self.blocks.as_ref().is_none_or(|b| b.contains(&block))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if let Some(b) = &self.blocks {
            if let Some(&i) = b.iter().find(|&&i| i >= model.depth) {
                return Err(Error::Config(format!(
                    "adapter block {i} out of range for depth {}",
                    model.depth
                )));
            }
        }
        if self.targets.is_empty() {
            return Ok(());
        }
        if self.rank == 0 || self.rank >= model.embed_dim {
            return Err(Error::Config(format!(
                "lora rank {} must satisfy 1 <= r < {}",
                self.rank, model.embed_dim
            )));
        }
        if self.attention && (self.rates.is_empty() || self.rates.contains(&0)) {
            return Err(Error::Config(format!("dilation rates {:?} must be positive", self.rates)));
        }
        Ok(())
    }
}
