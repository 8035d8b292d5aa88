use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Nonlinearity;

/// Attention geometry of one transformer stack (encoder or multimodal layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub depth: usize,
    pub cross_heads: usize,
    pub latent_heads: usize,
    pub cross_head_dim: usize,
    pub latent_head_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `d_LN`
    pub num_latents: usize,
    /// `d_LS`
    pub latent_dim: usize,
    pub encoder: BlockConfig,
    pub multimodal: BlockConfig,
    /// Feed-forward hidden width as a multiple of the block width.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_latent_init_std")]
    pub latent_init_std: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ff_mult() -> usize {
    1
}
fn default_latent_init_std() -> f64 {
    0.02
}
fn default_bn_momentum() -> f64 {
    0.1
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Hyperparameters of the four-task large setting.
    pub fn large() -> Self {
        Self {
            num_latents: 20,
            latent_dim: 64,
            encoder: BlockConfig {
                depth: 1,
                cross_heads: 1,
                latent_heads: 6,
                cross_head_dim: 64,
                latent_head_dim: 64,
            },
            multimodal: BlockConfig {
                depth: 1,
                cross_heads: 4,
                latent_heads: 6,
                cross_head_dim: 64,
                latent_head_dim: 64,
            },
            ff_mult: 1,
            nonlinearity: Nonlinearity::Gelu,
            latent_init_std: 0.02,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    /// A desk-scale configuration for fast experiments.
    pub fn tiny() -> Self {
        let block = BlockConfig {
            depth: 1,
            cross_heads: 1,
            latent_heads: 2,
            cross_head_dim: 8,
            latent_head_dim: 8,
        };
        Self {
            num_latents: 4,
            latent_dim: 16,
            encoder: block.clone(),
            multimodal: block,
            ff_mult: 1,
            nonlinearity: Nonlinearity::Gelu,
            latent_init_std: 0.02,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = [&self.encoder, &self.multimodal];
        let positive = self.num_latents > 0
            && self.latent_dim > 0
            && self.ff_mult > 0
            && blocks.iter().all(|b| {
                b.depth > 0
                    && b.cross_heads > 0
                    && b.latent_heads > 0
                    && b.cross_head_dim > 0
                    && b.latent_head_dim > 0
            });
        if !positive {
            return Err(Error::Config("model sizes must all be positive".into()));
        }
        if !(self.latent_init_std > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bad latent_init_std or bn_momentum".into()));
        }
        Ok(())
    }
}

/// Which components exist and which are shared across tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingConfig {
    pub use_modality_embeddings: bool,
    pub use_unimodal_encoder: bool,
    pub use_multimodal_layer: bool,
    pub share_unimodal_across_tasks: bool,
    pub share_multimodal_across_tasks: bool,
}

impl Default for SharingConfig {
    fn default() -> Self {
        Variant::Full.sharing()
    }
}

/// The ablation rows: the full model plus six single-change variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEmbeddings,
    NoUnimodal,
    NoMultimodal,
    Separate,
    SeparateUnimodal,
    SeparateMultimodal,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoEmbeddings,
        Variant::NoUnimodal,
        Variant::NoMultimodal,
        Variant::Separate,
        Variant::SeparateUnimodal,
        Variant::SeparateMultimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEmbeddings => "no_embeddings",
            Variant::NoUnimodal => "no_unimodal",
            Variant::NoMultimodal => "no_multimodal",
            Variant::Separate => "separate",
            Variant::SeparateUnimodal => "separate_unimodal",
            Variant::SeparateMultimodal => "separate_multimodal",
        }
    }

    pub fn sharing(self) -> SharingConfig {
        let mut s = SharingConfig {
            use_modality_embeddings: true,
            use_unimodal_encoder: true,
            use_multimodal_layer: true,
            share_unimodal_across_tasks: true,
            share_multimodal_across_tasks: true,
        };
        match self {
            Variant::Full => {}
            Variant::NoEmbeddings => s.use_modality_embeddings = false,
            Variant::NoUnimodal => s.use_unimodal_encoder = false,
            Variant::NoMultimodal => s.use_multimodal_layer = false,
            Variant::Separate => {
                s.share_unimodal_across_tasks = false;
                s.share_multimodal_across_tasks = false;
            }
            Variant::SeparateUnimodal => s.share_unimodal_across_tasks = false,
            Variant::SeparateMultimodal => s.share_multimodal_across_tasks = false,
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}`; valid: {}",
                    valid.join(", ")
                ))
            })
    }
}
