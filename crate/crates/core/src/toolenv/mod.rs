//! Synthetic tool-augmented QA world.
//!
//! A small key→value fact corpus, an exact-then-nearest search tool,
//! single-hop and two-hop questions, and an episode runner that
//! interleaves generated tokens with retrieved passages.

mod corpus;
mod demo;
mod episode;
pub mod io;
mod vocab;

pub use corpus::{Corpus, CorpusSpec, Question, Split};
pub use demo::{demonstration, reference_trajectory, Demo, DemoConfig};
pub use episode::{
    em_reward, episode_seed, evaluate, extract_answer, mean_reward, one_hot_logits, replay_eval, retrieval_accuracy,
    run_episode, Agent, AgentState, EndReason, EpisodeConfig, EpisodeRecord, ModelAgent, Retrieval, ScriptedAgent,
    ToolCall,
};
pub use vocab::Vocabulary;
