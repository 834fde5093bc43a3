//! Model and loss hyperparameters.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Common feature width of the decoders and the query features.
    pub width: usize,
    /// Sampling points per level and head.
    pub points: usize,
    /// Pyramid levels.
    pub levels: usize,
    /// Instance queries.
    pub queries: usize,
    pub heads: usize,
    pub pixel_layers: usize,
    pub decoder_rounds: usize,
    /// Channel width of each encoder stage, fine to coarse.
    pub encoder_widths: Vec<usize>,
    /// Width of the frozen token table.
    pub text_dim: usize,
    pub vocab_seed: u64,
    pub max_tokens: usize,
    /// Queries encoded per chunk at inference.
    pub query_chunk: usize,
    pub object_threshold: f64,
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 256,
            points: 4,
            levels: 4,
            queries: 100,
            heads: 8,
            pixel_layers: 6,
            decoder_rounds: 3,
            encoder_widths: vec![64, 96, 128, 160],
            text_dim: 128,
            vocab_seed: 0x5eed,
            max_tokens: 16,
            query_chunk: 256,
            object_threshold: 0.5,
            aux_loss: true,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for overfitting and quick runs.
    pub fn tiny() -> Self {
        Self {
            width: 32,
            queries: 8,
            heads: 4,
            pixel_layers: 2,
            decoder_rounds: 1,
            encoder_widths: vec![16, 24, 32, 40],
            text_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(input_err!("levels must be at least 2, got {}", self.levels));
        }
        if self.encoder_widths.len() != self.levels {
            return Err(input_err!("{} encoder widths for {} levels", self.encoder_widths.len(), self.levels));
        }
        if self.encoder_widths.contains(&0) || self.text_dim == 0 {
            return Err(input_err!("zero channel width"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(input_err!("heads {} must divide width {}", self.heads, self.width));
        }
        if self.width % 4 != 0 {
            return Err(input_err!("width {} must be a multiple of 4", self.width));
        }
        if self.points == 0 || self.queries == 0 || self.max_tokens == 0 || self.query_chunk == 0 {
            return Err(input_err!("points, queries, max_tokens and query_chunk must be positive"));
        }
        if !(0.0..1.0).contains(&self.object_threshold) {
            return Err(input_err!("object_threshold {} outside [0, 1)", self.object_threshold));
        }
        Ok(())
    }

    /// Stride of the finest level; the coarsest is this times `2^(levels-1)`.
    pub fn finest_stride(&self) -> usize {
        4
    }

    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.finest_stride() << (self.levels - 1)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder_rounds * (self.levels - 1)
    }

    /// `(height, width)` of each level for an image, coarse to fine.
    pub fn level_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        (0..self.levels)
            .map(|l| {
                let s = self.finest_stride() << (self.levels - 1 - l);
                (height / s, width / s)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub det: f64,
    pub cls: f64,
    pub adapt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 2.0, det: 2.0, cls: 1.0, adapt: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("seg", self.seg), ("det", self.det), ("cls", self.cls), ("adapt", self.adapt)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(input_err!("loss weight {n} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}
