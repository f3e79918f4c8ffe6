use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub intermediate_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub attention_dropout: f64,
    pub tie_output_embedding: bool,
}

impl ModelConfig {
    /// l=6, E=256, I=1024, h=4 with 64 positions: 4,781,056 parameters.
    pub fn small() -> Self {
        Self {
            layers: 6,
            embed_dim: 256,
            intermediate_dim: 1024,
            heads: 4,
            vocab_size: VOCAB_SIZE,
            max_positions: 64,
            attention_dropout: 0.1,
            tie_output_embedding: true,
        }
    }

    /// l=12, E=768, I=3072, h=12 with 1024 positions: 85,919,232 parameters.
    pub fn base() -> Self {
        Self {
            layers: 12,
            embed_dim: 768,
            intermediate_dim: 3072,
            heads: 12,
            vocab_size: VOCAB_SIZE,
            max_positions: 1024,
            attention_dropout: 0.1,
            tie_output_embedding: true,
        }
    }

    /// A desk-scale configuration for experiments and tests.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            embed_dim: 32,
            intermediate_dim: 128,
            heads: 4,
            vocab_size: VOCAB_SIZE,
            max_positions: 32,
            attention_dropout: 0.1,
            tie_output_embedding: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected small, base or toy)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Longest password the position table can score: `[SOS]` and `[EOS]`
    /// take two slots.
    pub fn max_password_len(&self) -> usize {
        self.max_positions.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.embed_dim == 0 || self.intermediate_dim == 0 || self.heads == 0 {
            return fail(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.vocab_size != VOCAB_SIZE {
            return fail(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return fail(format!("attention_dropout {} not in [0, 1)", self.attention_dropout));
        }
        Ok(())
    }
}

/// Closed-form parameter count of the decoder layout.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let (v, p, e, i, l) = (
        cfg.vocab_size,
        cfg.max_positions,
        cfg.embed_dim,
        cfg.intermediate_dim,
        cfg.layers,
    );
    let head = if cfg.tie_output_embedding { 0 } else { v * e };
    v * e + p * e + l * (4 * (e * e + e) + e * i + i + i * e + e + 4 * e) + 2 * e + head
}
