use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::advantage::group_advantage;
use super::loss::{accumulate_pg_grad, Scored, Target};
use super::optim::{warmup_lr, Optimizer, Sgd};
use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::policy::{Decoding, PolicyModel};
use crate::router::MaskVariant;
use crate::toolenv::{
    episode_seed, run_episode, Corpus, EpisodeConfig, EpisodeRecord, ModelAgent, Question, Retrieval, Split,
};

/// Which questions a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSet {
    #[default]
    All,
    SingleHop,
    TwoHop,
}

impl QuestionSet {
    pub fn admits(self, q: &Question) -> bool {
        match self {
            QuestionSet::All => true,
            QuestionSet::SingleHop => q.hops == 1,
            QuestionSet::TwoHop => q.hops == 2,
        }
    }

    pub fn select(self, corpus: &Corpus, split: Split) -> Vec<&Question> {
        corpus.split(split).filter(|q| self.admits(q)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Questions per step.
    pub rollout_batch: usize,
    /// Rollouts per question.
    pub group_size: usize,
    pub learning_rate: f64,
    pub kl_beta: f64,
    /// Stored for completeness. With one update per batch the probability
    /// ratio is always 1, so clipping never engages.
    pub clip_ratio: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub target: Target,
    pub seed: u64,
    pub momentum: f64,
    pub warmup_ratio: f64,
    pub budget: usize,
    pub top_k: usize,
    pub questions: QuestionSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            rollout_batch: 8,
            group_size: 8,
            learning_rate: 3e-3,
            kl_beta: 0.001,
            clip_ratio: 0.2,
            temperature: 1.0,
            top_p: 1.0,
            target: Target::DART,
            seed: 0,
            momentum: 0.9,
            warmup_ratio: 0.1,
            budget: 4,
            top_k: 3,
            questions: QuestionSet::All,
        }
    }
}

impl TrainConfig {
    /// The large-scale reference settings. Far too expensive for this model
    /// size; kept as documentation of where the desk defaults come from.
    pub fn reference_scale() -> Self {
        TrainConfig {
            steps: 100,
            rollout_batch: 256,
            group_size: 5,
            learning_rate: 1e-6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.kl_beta < 0.0 {
            return bad("kl_beta must be >= 0");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must be in (0, 1)");
        }
        if self.rollout_batch == 0 || self.group_size == 0 {
            return bad("rollout_batch and group_size must be >= 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be a finite number >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1]");
        }
        self.episode().validate()
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            budget: self.budget,
            top_k: self.top_k,
            decoding: Decoding::Sample {
                temperature: self.temperature,
                top_p: self.top_p,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm_reasoning: f64,
    pub grad_norm_tool: f64,
    pub kl_term: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,mean_reward,loss,grad_norm_reasoning,grad_norm_tool,kl_term";

pub fn write_train_log(rows: &[TrainRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.mean_reward, r.loss, r.grad_norm_reasoning, r.grad_norm_tool, r.kl_term
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Parameters of the adapter serving each role. A shared adapter serves
/// both, so both norms then measure the same vector.
fn role_params(model: &PolicyModel) -> (Vec<ParamId>, Vec<ParamId>) {
    let map = model.default_role_map();
    let ids = |i: Option<usize>| i.map(|i| model.adapters()[i].param_ids()).unwrap_or_default();
    (ids(map.reasoning), ids(map.tool))
}

/// Samples `group_size` rollouts for each of `questions`.
pub fn collect_rollouts(
    model: &PolicyModel,
    corpus: &Corpus,
    questions: &[&Question],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<Vec<EpisodeRecord>>> {
    let agent = ModelAgent::new(model);
    let ep = cfg.episode();
    questions
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            (0..cfg.group_size)
                .map(|i| {
                    let seed = episode_seed(cfg.seed, step as u64, (qi * cfg.group_size + i) as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let retrieval = Retrieval::Live { corpus, k: cfg.top_k };
                    run_episode(&agent, q, &corpus.vocab.grammar, retrieval, &ep, &mut rng)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
}

/// Group-relative policy-gradient training of `model`'s trainable
/// parameters on the training split.
///
/// The reference policy is a frozen copy of `model` at entry. On a
/// non-finite loss or gradient the parameters are restored to the last
/// stable step and [`Error::Diverged`] is returned.
pub fn train(model: &mut PolicyModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if let Target::Dart(_) = cfg.target {
        if model.adapter(crate::policy::AdapterSlot::Reasoning).is_none() {
            return Err(Error::Config("dart training needs a dual-adapter model".into()));
        }
    }
    let pool = cfg.questions.select(corpus, Split::Train);
    if pool.is_empty() {
        return Err(Error::Config("no training questions match the question set".into()));
    }
    let reference = model.clone();
    let ids = model.trainable_ids();
    let (reas_ids, tool_ids) = role_params(model);
    let mut opt = Sgd::new(cfg.momentum);
    let mut order_rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, u64::MAX, 0));
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut chosen = Vec::with_capacity(cfg.rollout_batch);
        while chosen.len() < cfg.rollout_batch {
            if order.is_empty() {
                order = (0..pool.len()).collect();
                order.shuffle(&mut order_rng);
            }
            chosen.push(pool[order.pop().unwrap()]);
        }
        let groups = collect_rollouts(model, corpus, &chosen, cfg, step)?;
        let mut scored = Vec::new();
        let mut reward_sum = 0.0;
        for g in &groups {
            let rewards: Vec<f64> = g.iter().map(|r| r.reward).collect();
            reward_sum += rewards.iter().sum::<f64>();
            for (r, a) in g.iter().zip(group_advantage(&rewards)) {
                scored.push(Scored {
                    tokens: &r.tokens,
                    prompt_len: r.prompt_len,
                    advantage: a,
                });
            }
        }
        let batch = scored.len();
        model.store_mut().zero_grad();
        let stable = model.store().clone();
        let stats = accumulate_pg_grad(model, Some(&reference), &scored, batch, cfg.target, cfg.kl_beta)?;
        let gr = model.store().grad_norm(&reas_ids);
        let gt = model.store().grad_norm(&tool_ids);
        let finite = stats.loss.is_finite() && gr.is_finite() && gt.is_finite();
        if finite {
            opt.step(
                model.store_mut(),
                &ids,
                warmup_lr(cfg.learning_rate, step, cfg.steps, cfg.warmup_ratio),
            );
        }
        if !finite || !model.store().flat_values(&ids).iter().all(|v| v.is_finite()) {
            *model.store_mut() = stable;
            model.store_mut().zero_grad();
            return Err(Error::Diverged {
                step,
                message: "non-finite loss, gradient or parameter".into(),
            });
        }
        rows.push(TrainRow {
            step,
            mean_reward: reward_sum / batch as f64,
            loss: stats.loss,
            grad_norm_reasoning: gr,
            grad_norm_tool: gt,
            kl_term: stats.kl,
        });
    }
    model.store_mut().zero_grad();
    Ok(TrainReport { rows })
}

/// Trains only the tokens of one role under dual routing; a convenience
/// for experiments that activate a single ability.
pub fn dart_role_target(role: crate::router::Role) -> Result<Target> {
    match role {
        crate::router::Role::Reasoning => Ok(Target::Dart(MaskVariant::Reas)),
        crate::router::Role::Tool => Ok(Target::Dart(MaskVariant::Tool)),
        crate::router::Role::Env => Err(Error::contract("env tokens are never trained")),
    }
}
