use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::router::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub split: Split,
    pub hops: u8,
    /// Question marker followed by the subject key; this is the prompt.
    pub surface: Vec<TokenId>,
    pub gold_answer: Vec<TokenId>,
    /// Keys looked up in order.
    pub gold_chain: Vec<TokenId>,
}

/// Size and seed of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_keys: u32,
    /// Keys whose value is another key.
    pub n_bridge: u32,
    pub n_values: u32,
    pub n_single_hop: u32,
    pub n_two_hop: u32,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 17,
            n_keys: 40,
            n_bridge: 20,
            n_values: 20,
            n_single_hop: 20,
            n_two_hop: 20,
            test_fraction: 0.5,
        }
    }
}

/// Key-value facts plus the question set built on them.
#[derive(Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    facts: BTreeMap<TokenId, TokenId>,
    pub questions: Vec<Question>,
    anomalies: AtomicUsize,
}

impl Clone for Corpus {
    fn clone(&self) -> Self {
        Corpus {
            vocab: self.vocab,
            facts: self.facts.clone(),
            questions: self.questions.clone(),
            anomalies: AtomicUsize::new(self.anomalies()),
        }
    }
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.facts == other.facts && self.questions == other.questions
    }
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let vocab = Vocabulary::new(spec.n_keys, spec.n_values);
        vocab.validate()?;
        if spec.n_bridge * 2 > spec.n_keys {
            return Err(Error::Config("corpus.n_bridge must be at most half of n_keys".into()));
        }
        if spec.n_two_hop > spec.n_bridge {
            return Err(Error::Config("corpus.n_two_hop cannot exceed n_bridge".into()));
        }
        if spec.n_single_hop > spec.n_keys {
            return Err(Error::Config("corpus.n_single_hop cannot exceed n_keys".into()));
        }
        if !(0.0..1.0).contains(&spec.test_fraction) {
            return Err(Error::Config("corpus.test_fraction must be in [0, 1)".into()));
        }
        let facts = random_facts(&vocab, spec.n_bridge, &mut rng);
        let mut keys: Vec<TokenId> = vocab.keys().collect();
        keys.shuffle(&mut rng);
        let bridges: Vec<TokenId> = facts
            .iter()
            .filter(|(_, v)| vocab.is_key(**v))
            .map(|(k, _)| *k)
            .collect();
        let mut bridges_shuffled = bridges.clone();
        bridges_shuffled.shuffle(&mut rng);

        let mut corpus = Corpus {
            vocab,
            facts,
            questions: vec![],
            anomalies: AtomicUsize::new(0),
        };
        let singles: Vec<Question> = keys[..spec.n_single_hop as usize]
            .iter()
            .map(|&k| corpus.make_question(0, 1, k))
            .collect::<Result<_>>()?;
        let doubles: Vec<Question> = bridges_shuffled[..spec.n_two_hop as usize]
            .iter()
            .map(|&k| corpus.make_question(0, 2, k))
            .collect::<Result<_>>()?;
        // Test split: the first `test_fraction` of each hop class.
        let mut questions = Vec::new();
        for group in [singles, doubles] {
            let n_test = (group.len() as f64 * spec.test_fraction).round() as usize;
            for (i, mut q) in group.into_iter().enumerate() {
                q.split = if i < n_test { Split::Test } else { Split::Train };
                questions.push(q);
            }
        }
        for (i, q) in questions.iter_mut().enumerate() {
            q.id = i as u32;
        }
        corpus.questions = questions;
        Ok(corpus)
    }

    /// Builds a corpus from explicit parts, validating every invariant.
    pub fn from_parts(
        vocab: Vocabulary,
        facts: BTreeMap<TokenId, TokenId>,
        questions: Vec<Question>,
    ) -> Result<Corpus> {
        vocab.validate()?;
        for (k, v) in &facts {
            if !vocab.is_key(*k) {
                return Err(Error::contract(format!("fact subject {k} is not a key token")));
            }
            if !vocab.is_key(*v) && !vocab.is_value(*v) {
                return Err(Error::contract(format!("fact object {v} is not a content token")));
            }
        }
        let corpus = Corpus {
            vocab,
            facts,
            questions,
            anomalies: AtomicUsize::new(0),
        };
        for q in &corpus.questions {
            let want = corpus.make_question(q.id, q.hops, q.gold_chain[0])?;
            if want.gold_answer != q.gold_answer || want.gold_chain != q.gold_chain || want.surface != q.surface {
                return Err(Error::contract(format!(
                    "question {} is inconsistent with the facts",
                    q.id
                )));
            }
        }
        let mut ids: Vec<u32> = corpus.questions.iter().map(|q| q.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != corpus.questions.len() {
            return Err(Error::contract("duplicate question ids"));
        }
        Ok(corpus)
    }

    fn make_question(&self, id: u32, hops: u8, subject: TokenId) -> Result<Question> {
        let marker = match hops {
            1 => self.vocab.single_hop,
            2 => self.vocab.two_hop,
            h => return Err(Error::contract(format!("unsupported hop count {h}"))),
        };
        let mut chain = vec![subject];
        let mut cur = self
            .value_of(subject)
            .ok_or_else(|| Error::contract(format!("no fact for key {subject}")))?;
        for _ in 1..hops {
            if !self.vocab.is_key(cur) {
                return Err(Error::contract(format!(
                    "key {subject} does not chain into a two-hop question"
                )));
            }
            chain.push(cur);
            cur = self
                .value_of(cur)
                .ok_or_else(|| Error::contract(format!("no fact for key {cur}")))?;
        }
        Ok(Question {
            id,
            split: Split::Train,
            hops,
            surface: vec![marker, subject],
            gold_answer: vec![cur],
            gold_chain: chain,
        })
    }

    pub fn facts(&self) -> &BTreeMap<TokenId, TokenId> {
        &self.facts
    }

    pub fn value_of(&self, key: TokenId) -> Option<TokenId> {
        self.facts.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// `key is value`
    pub fn passage(&self, key: TokenId) -> Option<Vec<TokenId>> {
        self.value_of(key).map(|v| vec![key, self.vocab.is, v])
    }

    pub fn anomalies(&self) -> usize {
        self.anomalies.load(Ordering::Relaxed)
    }

    pub fn question(&self, id: u32) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.split == split)
    }

    /// Top-`k` passages for `query`. The first known key in the query is an
    /// exact match and comes first; remaining slots go to the keys nearest
    /// in token id (lower id on ties). A query with no known key ranks by
    /// distance to its first token; an empty query returns the first `k`
    /// keys and counts an anomaly.
    pub fn search(&self, query: &[TokenId], k: usize) -> Result<Vec<Vec<TokenId>>> {
        if k == 0 {
            return Err(Error::contract("search needs k >= 1"));
        }
        let keys: Vec<TokenId> = self.facts.keys().copied().collect();
        let ranked: Vec<TokenId> = match query.first() {
            None => {
                self.anomalies.fetch_add(1, Ordering::Relaxed);
                keys.clone()
            }
            Some(&first) => {
                let anchor = query.iter().copied().find(|t| self.facts.contains_key(t));
                let pivot = anchor.unwrap_or(first);
                let mut ranked = keys.clone();
                ranked.sort_by_key(|&key| (key != pivot, key.abs_diff(pivot), key));
                ranked
            }
        };
        Ok(ranked
            .into_iter()
            .take(k)
            .map(|key| self.passage(key).expect("ranked keys have facts"))
            .collect())
    }
}

/// Random key→value facts: `n_bridge` keys point at distinct non-bridge
/// keys, every other key points at a value token.
pub(crate) fn random_facts<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    n_bridge: u32,
    rng: &mut R,
) -> BTreeMap<TokenId, TokenId> {
    let mut keys: Vec<TokenId> = vocab.keys().collect();
    keys.shuffle(rng);
    let (bridge, terminal) = keys.split_at(n_bridge as usize);
    let mut targets = terminal.to_vec();
    targets.shuffle(rng);
    let values: Vec<TokenId> = vocab.values().collect();
    let mut facts = BTreeMap::new();
    for (b, t) in bridge.iter().zip(&targets) {
        facts.insert(*b, *t);
    }
    // Values are dealt round-robin from a shuffled deck so they spread evenly.
    let mut deck = values.clone();
    deck.shuffle(rng);
    for (i, k) in terminal.iter().enumerate() {
        if i % deck.len() == 0 && i > 0 {
            deck.shuffle(rng);
        }
        facts.insert(*k, deck[i % deck.len()]);
    }
    facts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        Corpus::generate(&CorpusSpec::default()).unwrap()
    }

    #[test]
    fn generated_corpus_respects_invariants() {
        let c = corpus();
        assert_eq!(c.len(), 40);
        let bridges = c.facts().values().filter(|v| c.vocab.is_key(**v)).count();
        assert_eq!(bridges, 20);
        assert_eq!(c.questions.len(), 40);
        assert_eq!(c.questions.iter().filter(|q| q.hops == 2).count(), 20);
        for q in &c.questions {
            if q.hops == 2 {
                let mid = c.value_of(q.gold_chain[0]).unwrap();
                assert!(c.vocab.is_key(mid));
                assert_eq!(q.gold_answer, vec![c.value_of(mid).unwrap()]);
            } else {
                assert_eq!(q.gold_answer, vec![c.value_of(q.gold_chain[0]).unwrap()]);
            }
        }
        let train: Vec<u32> = c.split(Split::Train).map(|q| q.id).collect();
        let test: Vec<u32> = c.split(Split::Test).map(|q| q.id).collect();
        assert_eq!(train.len(), 20);
        assert!(train.iter().all(|id| !test.contains(id)));
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(corpus(), corpus());
    }

    #[test]
    fn exact_key_comes_first() {
        let c = corpus();
        let key = c.vocab.key_start + 17;
        let hits = c.search(&[key], 1).unwrap();
        assert_eq!(hits, vec![c.passage(key).unwrap()]);
    }

    #[test]
    fn top_three_returns_three() {
        let c = corpus();
        let hits = c.search(&[c.vocab.key_start + 3], 3).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0][0], c.vocab.key_start + 3);
    }

    #[test]
    fn unknown_query_falls_back_deterministically() {
        let c = corpus();
        let q = [c.vocab.value_start + 2];
        let a = c.search(&q, 3).unwrap();
        let b = c.search(&q, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(c.anomalies(), 0);
    }

    #[test]
    fn empty_query_counts_an_anomaly() {
        let c = corpus();
        let hits = c.search(&[], 3).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(c.anomalies(), 1);
        assert!(c.search(&[12], 0).is_err());
    }

    #[test]
    fn k_larger_than_corpus_is_capped() {
        let c = corpus();
        assert_eq!(c.search(&[12], 100).unwrap().len(), 40);
    }
}
