use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::accumulate_nll_grad;
use super::optim::{Adam, Optimizer};
use crate::error::{Error, Result};
use crate::policy::{argmax, PolicyModel, Routing};
use crate::router::{label_tokens, Role};
use crate::toolenv::{demonstration, Demo, DemoConfig, Vocabulary};

/// Supervised backbone training on noisy demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Steps run even after the target is reached. Greedy accuracy
    /// saturates long before the sampled distribution copies reliably.
    pub min_steps: usize,
    pub max_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub demo: DemoConfig,
    /// Clean demonstrations used to measure argmax accuracy.
    pub eval_size: usize,
    pub eval_every: usize,
    /// Stop once held-out accuracy reaches this.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            min_steps: 1500,
            max_steps: 3000,
            batch: 16,
            learning_rate: 3e-3,
            demo: DemoConfig::default(),
            eval_size: 64,
            eval_every: 50,
            target_accuracy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub accuracy: f64,
    pub reached_target: bool,
    pub rows: Vec<PretrainRow>,
}

/// Positions a policy is trained and scored on: after the prompt, not env.
pub fn trained_positions(demo: &Demo, vocab: &Vocabulary) -> Vec<bool> {
    let labels = label_tokens(&demo.tokens, &vocab.grammar);
    (0..demo.tokens.len())
        .map(|t| t >= demo.prompt_len && labels[t] != Role::Env)
        .collect()
}

/// Greedy next-token accuracy of the backbone on `demos`.
pub fn demo_accuracy(model: &PolicyModel, demos: &[Demo], vocab: &Vocabulary) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let v = model.config().vocab_size;
    for d in demos {
        let inputs = model.shifted_inputs(&d.tokens);
        let logits = model.forward_logits(&inputs, Routing::Backbone)?;
        for (t, keep) in trained_positions(d, vocab).into_iter().enumerate() {
            if keep {
                total += 1;
                hit += usize::from(argmax(&logits.data()[t * v..(t + 1) * v]) == d.tokens[t]);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Trains the backbone with Adam until clean-demo accuracy reaches the
/// target or `max_steps` run out. The model must not carry adapters.
pub fn pretrain(model: &mut PolicyModel, vocab: &Vocabulary, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if !model.adapters().is_empty() {
        return Err(Error::contract("pretraining expects a backbone-only model"));
    }
    if vocab.size() != model.config().vocab_size {
        return Err(Error::contract("vocabulary size does not match the model"));
    }
    if cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config(
            "pretrain.batch and pretrain.eval_every must be >= 1".into(),
        ));
    }
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_E7A1);
    let clean = cfg.demo.clean();
    let eval: Vec<Demo> = (0..cfg.eval_size)
        .map(|_| demonstration(vocab, &clean, &mut eval_rng))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = model.backbone_ids();
    for id in &ids {
        model.store_mut().set_requires_grad(*id, true);
    }
    let mut opt = Adam::default();
    let mut rows = Vec::new();
    let mut accuracy = 0.0;
    let mut step = 0;
    while step < cfg.max_steps {
        step += 1;
        let demos: Vec<Demo> = (0..cfg.batch)
            .map(|_| demonstration(vocab, &cfg.demo, &mut rng))
            .collect::<Result<_>>()?;
        let masks: Vec<Vec<bool>> = demos.iter().map(|d| trained_positions(d, vocab)).collect();
        let n: usize = masks.iter().map(|m| m.iter().filter(|x| **x).count()).sum();
        model.store_mut().zero_grad();
        let mut loss = 0.0;
        for (d, m) in demos.iter().zip(&masks) {
            loss += accumulate_nll_grad(model, &d.tokens, m, Routing::Backbone, n as f64)?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "pretraining loss is not finite".into(),
            });
        }
        opt.step(model.store_mut(), &ids, cfg.learning_rate);
        let mut row = PretrainRow {
            step,
            loss,
            accuracy: None,
        };
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            accuracy = demo_accuracy(model, &eval, vocab)?;
            row.accuracy = Some(accuracy);
            rows.push(row);
            if accuracy >= cfg.target_accuracy && step >= cfg.min_steps {
                break;
            }
        } else {
            rows.push(row);
        }
    }
    model.store_mut().zero_grad();
    Ok(PretrainReport {
        steps: step,
        accuracy,
        reached_target: accuracy >= cfg.target_accuracy,
        rows,
    })
}
