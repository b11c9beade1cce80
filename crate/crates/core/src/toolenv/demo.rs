//! Noisy demonstration trajectories for supervised backbone pretraining.
//!
//! Each demonstration draws a fresh random fact world, so the only way to
//! fit them is to copy from the prompt and from retrieved passages rather
//! than memorize facts. Copy steps are corrupted at fixed rates and the
//! demonstrator sometimes guesses instead of searching, which leaves the
//! pretrained policy competent but unreliable: room for RL.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::corpus::{random_facts, Corpus, Question};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::router::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Chance a reasoning-span copy is replaced by a random token.
    pub reasoning_noise: f64,
    /// Chance a search query is replaced by a random key.
    pub query_noise: f64,
    /// Chance, per hop, that the demonstrator guesses a random value
    /// instead of searching.
    pub skip_search: f64,
    /// Fraction of two-hop demonstrations.
    pub two_hop_fraction: f64,
    pub n_bridge: u32,
    pub top_k: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            reasoning_noise: 0.1,
            query_noise: 0.1,
            skip_search: 0.4,
            two_hop_fraction: 0.5,
            n_bridge: 20,
            top_k: 3,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("reasoning_noise", self.reasoning_noise),
            ("query_noise", self.query_noise),
            ("skip_search", self.skip_search),
            ("two_hop_fraction", self.two_hop_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("demo.{name} must be in [0, 1]")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("demo.top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn clean(self) -> Self {
        DemoConfig {
            reasoning_noise: 0.0,
            query_noise: 0.0,
            skip_search: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

/// One demonstration in a freshly sampled world.
pub fn demonstration<R: Rng + ?Sized>(vocab: &Vocabulary, cfg: &DemoConfig, rng: &mut R) -> Result<Demo> {
    cfg.validate()?;
    let facts = random_facts(vocab, cfg.n_bridge, rng);
    let world = Corpus::from_parts(*vocab, facts, vec![])?;
    let two_hop = cfg.n_bridge > 0 && rng.random::<f64>() < cfg.two_hop_fraction;
    let subject = if two_hop {
        let bridges: Vec<TokenId> = world
            .facts()
            .iter()
            .filter(|(_, v)| vocab.is_key(**v))
            .map(|(k, _)| *k)
            .collect();
        bridges[rng.random_range(0..bridges.len())]
    } else {
        vocab.key_start + rng.random_range(0..vocab.n_keys)
    };
    write_trajectory(&world, subject, two_hop, cfg, rng)
}

/// The noise-free trajectory for `question`: the behavior a perfect agent
/// shows on this corpus.
pub fn reference_trajectory(corpus: &Corpus, question: &Question, top_k: usize) -> Result<Vec<TokenId>> {
    let cfg = DemoConfig {
        top_k,
        ..DemoConfig::default().clean()
    };
    // Noise-free, so the generator is never drawn from.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let demo = write_trajectory(corpus, question.gold_chain[0], question.hops == 2, &cfg, &mut rng)?;
    Ok(demo.tokens)
}

fn write_trajectory<R: Rng + ?Sized>(
    world: &Corpus,
    subject: TokenId,
    two_hop: bool,
    cfg: &DemoConfig,
    rng: &mut R,
) -> Result<Demo> {
    let vocab = &world.vocab;
    let g = vocab.grammar;
    let random_key = |rng: &mut R| vocab.key_start + rng.random_range(0..vocab.n_keys);
    let random_value = |rng: &mut R| vocab.value_start + rng.random_range(0..vocab.n_values);
    let noisy = |rng: &mut R, p: f64| p > 0.0 && rng.random::<f64>() < p;
    let marker = if two_hop { vocab.two_hop } else { vocab.single_hop };
    let mut tokens = vec![marker, subject];
    let prompt_len = tokens.len();

    let mut about = subject;
    let hops = if two_hop { 2 } else { 1 };
    for _ in 0..hops {
        let thought = if noisy(rng, cfg.reasoning_noise) {
            random_key(rng)
        } else {
            about
        };
        tokens.extend([g.think_open, thought, g.think_close]);
        if noisy(rng, cfg.skip_search) {
            let guess = random_value(rng);
            tokens.extend([g.answer_open, guess, g.answer_close]);
            return Ok(Demo { tokens, prompt_len });
        }
        let query = if noisy(rng, cfg.query_noise) {
            random_key(rng)
        } else {
            thought
        };
        tokens.extend([g.search_open, query, g.search_close]);
        let passages = world.search(&[query], cfg.top_k)?;
        tokens.push(g.info_open);
        tokens.extend(passages.iter().flatten());
        tokens.push(g.info_close);
        // The reader trusts the top passage.
        about = passages[0][2];
    }
    let thought = if noisy(rng, cfg.reasoning_noise) {
        random_value(rng)
    } else {
        about
    };
    tokens.extend([g.think_open, thought, g.think_close]);
    let answer = if noisy(rng, cfg.reasoning_noise) {
        random_value(rng)
    } else {
        thought
    };
    tokens.extend([g.answer_open, answer, g.answer_close]);
    Ok(Demo { tokens, prompt_len })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::router::{label_tokens_counted, Role};

    #[test]
    fn clean_demos_are_well_formed_and_correct() {
        let v = Vocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DemoConfig::default().clean();
        for _ in 0..50 {
            let d = demonstration(&v, &cfg, &mut rng).unwrap();
            let (roles, anomalies) = label_tokens_counted(&d.tokens, &v.grammar);
            assert_eq!(anomalies, 0);
            assert!(matches!(d.tokens.len(), 25 | 42), "{}", v.render(&d.tokens));
            assert!(roles.contains(&Role::Tool) && roles.contains(&Role::Env));
            assert_eq!(*d.tokens.last().unwrap(), v.grammar.answer_close);
        }
    }
}
