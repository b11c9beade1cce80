use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Question};
use crate::error::{Error, Result};
use crate::policy::{Decoder, Decoding, PolicyModel, RoleMap};
use crate::router::{label_tokens, Role, Router, RouterState, SegmentGrammar, TokenId};

/// Anything that can produce next-token logits for a growing prefix.
pub trait Agent {
    fn begin(&self) -> Result<Box<dyn AgentState + '_>>;

    /// Longest trajectory (prompt included) the agent can score.
    fn max_seq(&self) -> usize;
}

/// Per-episode generation state.
pub trait AgentState {
    /// Appends a token to the context, sampled or environment-provided.
    fn push(&mut self, token: TokenId) -> Result<()>;

    /// Next-token logits when the next token belongs to `role`.
    fn logits(&mut self, role: Role) -> Result<Vec<f64>>;
}

/// A policy model decoded with a KV cache.
#[derive(Debug, Clone, Copy)]
pub struct ModelAgent<'m> {
    pub model: &'m PolicyModel,
    pub map: RoleMap,
}

impl<'m> ModelAgent<'m> {
    /// Uses the model's own role map.
    pub fn new(model: &'m PolicyModel) -> Self {
        ModelAgent {
            model,
            map: model.default_role_map(),
        }
    }

    pub fn with_map(model: &'m PolicyModel, map: RoleMap) -> Self {
        ModelAgent { model, map }
    }
}

impl<'m> AgentState for Decoder<'m> {
    fn push(&mut self, token: TokenId) -> Result<()> {
        Decoder::push(self, token)
    }

    fn logits(&mut self, role: Role) -> Result<Vec<f64>> {
        Ok(Decoder::logits(self, role).to_vec())
    }
}

impl Agent for ModelAgent<'_> {
    fn begin(&self) -> Result<Box<dyn AgentState + '_>> {
        Ok(Box::new(Decoder::new(self.model, self.map)?))
    }

    fn max_seq(&self) -> usize {
        self.model.config().max_seq
    }
}

/// Deterministic agent driven by a function of the prefix. The function
/// returns the token to emit; every other token gets a very low logit.
pub struct ScriptedAgent<F> {
    pub vocab_size: usize,
    pub max_seq: usize,
    pub script: F,
}

struct ScriptedState<'a, F> {
    agent: &'a ScriptedAgent<F>,
    prefix: Vec<TokenId>,
}

impl<F: Fn(&[TokenId], Role) -> Vec<f64>> Agent for ScriptedAgent<F> {
    fn begin(&self) -> Result<Box<dyn AgentState + '_>> {
        Ok(Box::new(ScriptedState {
            agent: self,
            prefix: vec![],
        }))
    }

    fn max_seq(&self) -> usize {
        self.max_seq
    }
}

impl<F: Fn(&[TokenId], Role) -> Vec<f64>> AgentState for ScriptedState<'_, F> {
    fn push(&mut self, token: TokenId) -> Result<()> {
        self.prefix.push(token);
        Ok(())
    }

    fn logits(&mut self, role: Role) -> Result<Vec<f64>> {
        let l = (self.agent.script)(&self.prefix, role);
        if l.len() != self.agent.vocab_size {
            return Err(Error::contract("scripted logits have the wrong width"));
        }
        Ok(l)
    }
}

/// Logit row that puts essentially all mass on `token`.
pub fn one_hot_logits(vocab_size: usize, token: TokenId) -> Vec<f64> {
    let mut l = vec![-1e9; vocab_size];
    l[token as usize] = 0.0;
    l
}

/// Where search results come from.
#[derive(Debug, Clone, Copy)]
pub enum Retrieval<'a> {
    /// Run the query against the corpus, top `k`.
    Live { corpus: &'a Corpus, k: usize },
    /// Answer the n-th search with the n-th recorded result, ignoring the
    /// query. Searches past the end of the recording get nothing.
    Replay(&'a [ToolCall]),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub query: Vec<TokenId>,
    pub passages: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Answered,
    MaxSeq,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub question_id: u32,
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    /// Span label of each token.
    pub roles: Vec<Role>,
    pub tool_calls: Vec<ToolCall>,
    pub answer: Option<Vec<TokenId>>,
    pub gold_answer: Vec<TokenId>,
    pub reward: f64,
    pub end: EndReason,
}

impl EpisodeRecord {
    /// Number of tokens the agent produced (prompt and env excluded).
    pub fn generated_len(&self) -> usize {
        self.tokens[self.prompt_len..]
            .iter()
            .zip(&self.roles[self.prompt_len..])
            .filter(|(_, r)| **r != Role::Env)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Maximum executed searches per episode.
    pub budget: usize,
    /// Passages per search.
    pub top_k: usize,
    pub decoding: Decoding,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            budget: 4,
            top_k: 3,
            decoding: Decoding::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("episode.top_k must be >= 1".into()));
        }
        self.decoding.validate()
    }
}

/// 1 iff the sequences match after dropping answer markers, else 0.
pub fn em_reward(answer: &[TokenId], gold: &[TokenId], grammar: &SegmentGrammar) -> f64 {
    let strip = |s: &[TokenId]| -> Vec<TokenId> {
        s.iter()
            .copied()
            .filter(|&t| t != grammar.answer_open && t != grammar.answer_close)
            .collect()
    };
    if strip(answer) == strip(gold) {
        1.0
    } else {
        0.0
    }
}

/// Contents of the last closed answer span.
pub fn extract_answer(tokens: &[TokenId], grammar: &SegmentGrammar) -> Option<Vec<TokenId>> {
    let close = tokens.iter().rposition(|&t| t == grammar.answer_close)?;
    let open = tokens[..close].iter().rposition(|&t| t == grammar.answer_open)?;
    Some(tokens[open + 1..close].to_vec())
}

/// Derives a per-episode seed from a run seed and two indices.
pub fn episode_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(32))
}

/// Runs one interleaved generate/search episode.
///
/// Tokens are generated one at a time under the role the router assigns to
/// the next position (env counts as reasoning if the agent itself opens an
/// information span). A `</search>` that closes a search span triggers
/// retrieval and appends `<information> passages </information>` as env
/// tokens. The episode stops after `</answer>`, at `max_seq`, or when a
/// search beyond the budget is attempted; that last attempt is answered
/// with an empty information span and is not recorded as a tool call.
pub fn run_episode<R: Rng + ?Sized>(
    agent: &dyn Agent,
    question: &Question,
    grammar: &SegmentGrammar,
    retrieval: Retrieval<'_>,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let max_seq = agent.max_seq();
    if question.surface.len() >= max_seq {
        return Err(Error::contract("prompt does not fit in max_seq"));
    }
    let mut state = agent.begin()?;
    let mut router = Router::new(*grammar);
    let mut tokens: Vec<TokenId> = Vec::with_capacity(max_seq);
    for &t in &question.surface {
        tokens.push(t);
        router.feed(t);
        state.push(t)?;
    }
    let mut tool_calls = Vec::new();
    let mut attempts = 0usize;
    let mut search_start = None;
    let end = loop {
        if tokens.len() >= max_seq {
            break EndReason::MaxSeq;
        }
        let role = match router.next_role() {
            Role::Env => Role::Reasoning,
            r => r,
        };
        let logits = state.logits(role)?;
        let tok = cfg.decoding.choose(&logits, rng)?;
        let before = router.state();
        tokens.push(tok);
        router.feed(tok);
        if tok == grammar.search_open {
            search_start = Some(tokens.len());
        }
        if tok == grammar.answer_close && before == RouterState::Answer {
            break EndReason::Answered;
        }
        let mut appended = vec![tok];
        let mut stop = None;
        if tok == grammar.search_close && before == RouterState::Search {
            attempts += 1;
            let query = tokens[search_start.unwrap_or(tokens.len() - 1)..tokens.len() - 1].to_vec();
            let passages = if attempts > cfg.budget {
                stop = Some(EndReason::Budget);
                vec![]
            } else {
                let p = match retrieval {
                    Retrieval::Live { corpus, k } => corpus.search(&query, k)?,
                    Retrieval::Replay(calls) => calls.get(attempts - 1).map(|c| c.passages.clone()).unwrap_or_default(),
                };
                tool_calls.push(ToolCall {
                    query,
                    passages: p.clone(),
                });
                p
            };
            let mut info = vec![grammar.info_open];
            info.extend(passages.iter().flatten());
            info.push(grammar.info_close);
            for t in info {
                if tokens.len() >= max_seq {
                    stop = Some(EndReason::MaxSeq);
                    break;
                }
                tokens.push(t);
                router.feed(t);
                appended.push(t);
            }
        }
        if let Some(reason) = stop {
            break reason;
        }
        if tokens.len() >= max_seq {
            break EndReason::MaxSeq;
        }
        for t in appended {
            state.push(t)?;
        }
    };
    let answer = extract_answer(&tokens[question.surface.len()..], grammar);
    let reward = answer
        .as_ref()
        .map_or(0.0, |a| em_reward(a, &question.gold_answer, grammar));
    Ok(EpisodeRecord {
        question_id: question.id,
        prompt_len: question.surface.len(),
        roles: label_tokens(&tokens, grammar),
        tokens,
        tool_calls,
        answer,
        gold_answer: question.gold_answer.clone(),
        reward,
        end,
    })
}

/// Mean over episodes of "some retrieved passage contains the gold answer".
pub fn retrieval_accuracy(records: &[EpisodeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("retrieval accuracy of an empty record list"));
    }
    let hits = records
        .iter()
        .filter(|r| {
            !r.gold_answer.is_empty()
                && r.tool_calls
                    .iter()
                    .flat_map(|c| &c.passages)
                    .any(|p| p.windows(r.gold_answer.len()).any(|w| w == r.gold_answer.as_slice()))
        })
        .count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn mean_reward(records: &[EpisodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64
}

/// Runs `samples` episodes per question with seeds derived from `seed`.
pub fn evaluate(
    agent: &dyn Agent,
    corpus: &Corpus,
    questions: &[&Question],
    cfg: &EpisodeConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::with_capacity(questions.len() * samples);
    for q in questions {
        for s in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, q.id as u64, s as u64));
            let retrieval = Retrieval::Live { corpus, k: cfg.top_k };
            out.push(run_episode(agent, q, &corpus.vocab.grammar, retrieval, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

/// EM of `agent` when every search it issues is answered from `records`
/// in order. Episode `i` uses the same derived seed as `records[i]` would
/// under [`evaluate`] with one sample per question.
pub fn replay_eval(
    agent: &dyn Agent,
    corpus: &Corpus,
    records: &[EpisodeRecord],
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("replay evaluation needs records"));
    }
    let mut total = 0.0;
    for rec in records {
        let q = corpus.question(rec.question_id).ok_or_else(|| Error::Unknown {
            kind: "question id",
            name: rec.question_id.to_string(),
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, q.id as u64, 0));
        let out = run_episode(
            agent,
            q,
            &corpus.vocab.grammar,
            Retrieval::Replay(&rec.tool_calls),
            cfg,
            &mut rng,
        )?;
        total += out.reward;
    }
    Ok(total / records.len() as f64)
}
