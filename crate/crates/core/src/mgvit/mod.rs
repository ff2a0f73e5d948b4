//! Toy-scale vision transformer whose last layers steer the class token
//! with the pooled region mask.

mod checkpoint;
mod model;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use model::{ForwardOutput, ForwardVars, MgVit};
pub use params::{ParamStore, ParamsLayout};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::GradError;
use crate::raster::BinaryMask;
use crate::scalar::NEG;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected a {expected}x{expected} input, got {width}x{height}")]
    DimensionMismatch { expected: usize, width: usize, height: usize },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Which query rows receive the additive mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Class token and patch tokens.
    AllTokens,
    /// Patch tokens only.
    PatchTokens,
    /// Class token only.
    #[default]
    ClassToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub masked_layers: usize,
    pub num_known_classes: usize,
    pub num_novel_classes: usize,
    pub projection_dim: usize,
    pub projection_hidden: usize,
    pub mlp_hidden: usize,
    pub num_heads_classifier: usize,
    pub mask_target: MaskTarget,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 4,
            masked_layers: 3,
            num_known_classes: 2,
            num_novel_classes: 3,
            projection_dim: 16,
            projection_hidden: 64,
            mlp_hidden: 64,
            num_heads_classifier: 2,
            mask_target: MaskTarget::ClassToken,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 || self.input_side == 0 || !self.input_side.is_multiple_of(self.patch_size) {
            return bad("input_side must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.masked_layers > self.num_layers {
            return bad("masked_layers must not exceed num_layers");
        }
        if self.num_classes() == 0 {
            return bad("at least one class is required");
        }
        if self.num_heads_classifier == 0 || self.projection_dim == 0 {
            return bad("classifier heads and projection_dim must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_side / self.patch_size
    }

    /// Patch token count `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_classes(&self) -> usize {
        self.num_known_classes + self.num_novel_classes
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Layers `>= first_masked_layer()` use mask-guided attention.
    pub fn first_masked_layer(&self) -> usize {
        self.num_layers - self.masked_layers
    }
}

/// Pooled mask with the class-token entry prepended, plus its additive form.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    pub pooled: Vec<f64>,
    pub additive: Vec<f64>,
}

impl MaskVector {
    /// Every position open.
    pub fn open(num_patches: usize) -> Self {
        Self { pooled: vec![1.0; num_patches + 1], additive: vec![0.0; num_patches + 1] }
    }

    fn from_pooled(pooled: Vec<f64>) -> Self {
        let additive = pooled.iter().map(|&p| if p > 0.5 { 0.0 } else { NEG }).collect();
        Self { pooled, additive }
    }
}

/// Average-pools the mask over patch cells; a cell is open only when
/// strictly more than half covered.
pub fn pool_mask(sub_mask: &BinaryMask, cfg: &ModelConfig) -> Result<MaskVector, ModelError> {
    if sub_mask.width() != cfg.input_side || sub_mask.height() != cfg.input_side {
        return Err(ModelError::DimensionMismatch {
            expected: cfg.input_side,
            width: sub_mask.width(),
            height: sub_mask.height(),
        });
    }
    let p = cfg.patch_size;
    let cell = (p * p) as f64;
    let mut pooled = Vec::with_capacity(cfg.num_patches() + 1);
    pooled.push(1.0);
    for gy in 0..cfg.grid() {
        for gx in 0..cfg.grid() {
            let mut on = 0usize;
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    on += usize::from(sub_mask.get(x, y));
                }
            }
            pooled.push(on as f64 / cell);
        }
    }
    Ok(MaskVector::from_pooled(pooled))
}
