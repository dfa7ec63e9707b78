//! Model dimensions and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of one latent-attention layer.
///
/// The latent cache replaces per-head keys and values with a single
/// compressed vector of width [`latent_dim`](Self::latent_dim) per token,
/// plus one shared rotary key of width [`rope_dim`](Self::rope_dim). The
/// default geometry keeps `latent_dim = 4 * head_dim`, i.e. the latent is as
/// wide as four value heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model (residual stream) width `D`.
    pub hidden_dim: usize,
    /// Number of query heads.
    pub num_heads: usize,
    /// Per-head key/value width for the non-positional path.
    pub head_dim: usize,
    /// Width of the shared rotary key and the per-head rotary query.
    pub rope_dim: usize,
    /// Width of the compressed KV latent.
    pub latent_dim: usize,
    /// Rank of the query down-projection.
    pub q_rank: usize,
    /// RMS normalization stabilizer.
    pub eps: f64,
}

impl ModelConfig {
    /// Validates and returns the configuration.
    pub fn new(
        hidden_dim: usize,
        num_heads: usize,
        head_dim: usize,
        rope_dim: usize,
        latent_dim: usize,
        q_rank: usize,
        eps: f64,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            hidden_dim,
            num_heads,
            head_dim,
            rope_dim,
            latent_dim,
            q_rank,
            eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks dimension sanity; used by constructors and deserializers.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("rope_dim", self.rope_dim),
            ("latent_dim", self.latent_dim),
            ("q_rank", self.q_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.rope_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rope_dim must be even for rotary pairs, got {}",
                self.rope_dim
            )));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::InvalidConfig(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Small geometry for fast exhaustive testing. Keeps the standard
    /// `latent_dim = 4 * head_dim` ratio at desk scale.
    pub fn toy() -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_heads: 4,
            head_dim: 8,
            rope_dim: 4,
            latent_dim: 32,
            q_rank: 16,
            eps: 1e-6,
        }
    }

    /// Production-scale geometry of a 671B-class deployment: 128 heads of
    /// width 128, a 512-wide latent, and a 64-wide rotary key. Used by the
    /// cost model; far too large to run numerically in tests.
    pub fn dsv3_dims() -> Self {
        ModelConfig {
            hidden_dim: 7168,
            num_heads: 128,
            head_dim: 128,
            rope_dim: 64,
            latent_dim: 512,
            q_rank: 1536,
            eps: 1e-6,
        }
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "dsv3-dims" => Ok(Self::dsv3_dims()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (available: toy, dsv3-dims)"
            ))),
        }
    }

    /// Width of the concatenated per-head attention outputs, `num_heads *
    /// head_dim`.
    pub fn proj_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Per-head query/key width including the rotary part.
    pub fn qk_width(&self) -> usize {
        self.head_dim + self.rope_dim
    }

    /// Attention logit scale `1 / sqrt(head_dim + rope_dim)`, matching the
    /// full query/key width whenever rotary logits participate.
    pub fn logit_scale(&self) -> f64 {
        1.0 / (self.qk_width() as f64).sqrt()
    }
}
