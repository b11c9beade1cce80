use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::TokenId;

/// Which low-rank adapter sets a policy carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterLayout {
    /// Backbone only.
    None,
    /// One adapter applied to every token (plain LoRA).
    Single { rank: usize },
    /// Disjoint reasoning and tool adapters, routed per token.
    Dual { reasoning_rank: usize, tool_rank: usize },
}

impl AdapterLayout {
    pub fn slots(&self) -> Vec<(AdapterSlot, usize)> {
        match *self {
            AdapterLayout::None => vec![],
            AdapterLayout::Single { rank } => vec![(AdapterSlot::Shared, rank)],
            AdapterLayout::Dual {
                reasoning_rank,
                tool_rank,
            } => vec![(AdapterSlot::Reasoning, reasoning_rank), (AdapterSlot::Tool, tool_rank)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSlot {
    Shared,
    Reasoning,
    Tool,
}

impl AdapterSlot {
    pub fn name(self) -> &'static str {
        match self {
            AdapterSlot::Shared => "shared",
            AdapterSlot::Reasoning => "reasoning",
            AdapterSlot::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    pub bos_token: TokenId,
    pub adapters: AdapterLayout,
    /// Std of the `A` factor at initialization, as a multiple of `1/sqrt(in)`.
    pub adapter_init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: 72,
            dim: 32,
            layers: 2,
            heads: 2,
            max_seq: 128,
            mlp_hidden: 64,
            bos_token: 0,
            adapters: AdapterLayout::Dual {
                reasoning_rank: 8,
                tool_rank: 8,
            },
            adapter_init_scale: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_seq", self.max_seq),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("policy.{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "policy.dim ({}) must be divisible by policy.heads ({})",
                self.dim, self.heads
            )));
        }
        if self.bos_token as usize >= self.vocab_size {
            return Err(Error::Config("policy.bos_token outside the vocabulary".into()));
        }
        for (slot, rank) in self.adapters.slots() {
            // Every adapted layer has min(in, out) >= dim.min(vocab, mlp_hidden).
            let smallest = self.dim.min(self.mlp_hidden).min(self.vocab_size);
            if rank == 0 || rank >= smallest {
                return Err(Error::Config(format!(
                    "{} adapter rank {rank} must be in 1..{smallest} (low rank)",
                    slot.name()
                )));
            }
        }
        Ok(())
    }

    pub fn with_adapters(&self, adapters: AdapterLayout) -> Self {
        PolicyConfig {
            adapters,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        PolicyConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_full_rank() {
        let mut c = PolicyConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.heads = 2;
        c.adapters = AdapterLayout::Single { rank: 64 };
        assert!(c.validate().is_err());
    }
}
