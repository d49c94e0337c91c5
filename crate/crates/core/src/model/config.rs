use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{DEFAULT_TEXT_VOCAB, IMAGE_VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden_factor: usize,
    /// Number of trailing blocks whose channel mixing is a mixture of
    /// experts.
    pub moe_layers: usize,
    /// Standard deviation of the router noise added during training.
    pub router_noise_std: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 3,
            top_k: 2,
            expert_hidden_factor: 2,
            moe_layers: 1,
            router_noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub mlp_hidden_factor: usize,
    pub moe: MoeConfig,
    pub reparam_rank: usize,
    pub vocab_total: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two blocks of width 96 with the default unified vocabulary.
    pub fn small() -> Self {
        Self::new(2, 96, IMAGE_VOCAB + DEFAULT_TEXT_VOCAB)
    }

    /// Defaults for everything but depth, width and vocabulary; the
    /// reparameterization rank is four times the width.
    pub fn new(n_blocks: usize, embed_dim: usize, vocab_total: usize) -> Self {
        ModelConfig {
            n_blocks,
            embed_dim,
            mlp_hidden_factor: 4,
            moe: MoeConfig::default(),
            reparam_rank: 4 * embed_dim,
            vocab_total,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_blocks == 0 || self.embed_dim == 0 {
            return fail("n_blocks and embed_dim must be positive".into());
        }
        if self.mlp_hidden_factor == 0 || self.moe.expert_hidden_factor == 0 || self.reparam_rank == 0 {
            return fail("hidden factors and reparam_rank must be positive".into());
        }
        if self.moe.top_k == 0 || self.moe.top_k > self.moe.n_experts {
            return fail(format!(
                "top_k {} must lie in 1..={}",
                self.moe.top_k, self.moe.n_experts
            ));
        }
        if self.moe.moe_layers > self.n_blocks {
            return fail(format!(
                "moe_layers {} exceeds n_blocks {}",
                self.moe.moe_layers, self.n_blocks
            ));
        }
        if !(self.moe.router_noise_std >= 0.0 && self.moe.router_noise_std.is_finite()) {
            return fail("router_noise_std must be a finite non-negative number".into());
        }
        if self.vocab_total <= IMAGE_VOCAB {
            return fail(format!("vocab_total {} leaves no text tokens", self.vocab_total));
        }
        Ok(())
    }

    /// Whether block `i` uses the mixture of experts.
    pub fn is_moe_block(&self, i: usize) -> bool {
        i + self.moe.moe_layers >= self.n_blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_config_is_valid() {
        let c = ModelConfig::small();
        c.validate().unwrap();
        assert_eq!((c.n_blocks, c.embed_dim, c.reparam_rank, c.vocab_total), (2, 96, 384, 16640));
        assert!(!c.is_moe_block(0) && c.is_moe_block(1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::small();
        c.moe.top_k = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.moe.moe_layers = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.vocab_total = 256;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.moe.router_noise_std = -1.0;
        assert!(c.validate().is_err());
    }
}
