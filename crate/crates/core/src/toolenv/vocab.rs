use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{SegmentGrammar, TokenId};

/// Integer vocabulary of the synthetic QA world.
///
/// `0` is BOS, `1..=8` the segment markers, then the passage connective,
/// the two question markers, a block of key tokens and a disjoint block of
/// value tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub grammar: SegmentGrammar,
    pub bos: TokenId,
    pub is: TokenId,
    pub single_hop: TokenId,
    pub two_hop: TokenId,
    pub key_start: TokenId,
    pub n_keys: u32,
    pub value_start: TokenId,
    pub n_values: u32,
}

impl Vocabulary {
    pub fn new(n_keys: u32, n_values: u32) -> Self {
        let key_start = 12;
        Vocabulary {
            grammar: SegmentGrammar::default(),
            bos: 0,
            is: 9,
            single_hop: 10,
            two_hop: 11,
            key_start,
            n_keys,
            value_start: key_start + n_keys,
            n_values,
        }
    }

    pub fn size(&self) -> usize {
        (self.value_start + self.n_values) as usize
    }

    pub fn content_start(&self) -> TokenId {
        self.key_start
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        (self.key_start..self.key_start + self.n_keys).contains(&t)
    }

    pub fn is_value(&self, t: TokenId) -> bool {
        (self.value_start..self.value_start + self.n_values).contains(&t)
    }

    pub fn keys(&self) -> impl Iterator<Item = TokenId> {
        self.key_start..self.key_start + self.n_keys
    }

    pub fn values(&self) -> impl Iterator<Item = TokenId> {
        self.value_start..self.value_start + self.n_values
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate(self.content_start())?;
        let specials = [self.bos, self.is, self.single_hop, self.two_hop];
        for (i, s) in specials.iter().enumerate() {
            if self.grammar.is_marker(*s) || specials[i + 1..].contains(s) || *s >= self.key_start {
                return Err(Error::contract(format!("special token {s} collides")));
            }
        }
        if self.n_keys == 0 || self.n_values == 0 {
            return Err(Error::contract("vocabulary needs keys and values"));
        }
        if self.value_start < self.key_start + self.n_keys {
            return Err(Error::contract("key and value ranges overlap"));
        }
        Ok(())
    }

    /// Human-readable rendering, for reports and debugging.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| {
                if let Some(n) = self.grammar.name_of(t) {
                    n.to_string()
                } else if t == self.bos {
                    "<bos>".into()
                } else if t == self.is {
                    "is".into()
                } else if t == self.single_hop {
                    "Q1".into()
                } else if t == self.two_hop {
                    "Q2".into()
                } else if self.is_key(t) {
                    format!("k{}", t - self.key_start)
                } else if self.is_value(t) {
                    format!("v{}", t - self.value_start)
                } else {
                    format!("#{t}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(40, 20)
    }
}
