//! Angles between role-specific policy gradients.
//!
//! For each sampled trajectory the policy-gradient objective is split by
//! token label into its reasoning part and its tool part, and each part is
//! backpropagated separately. Cross-role angles within a trajectory are
//! compared with same-role angles across trajectories. Parameters are never
//! updated and gradients are never clipped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::leas::csv_error;
use crate::policy::{AdapterSlot, PolicyModel};
use crate::router::{MaskVariant, Role, TokenId};
use crate::toolenv::{evaluate, Agent, Corpus, EpisodeConfig, EpisodeRecord, ModelAgent, Question};
use crate::trainer::{accumulate_pg_grad, token_mask, Scored, Target};

/// Rollouts per report.
pub const DEFAULT_ROLLOUTS: usize = 16;
pub const ANGLES_FILE: &str = "gradient_angles.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub role: Role,
    pub trajectory: usize,
    pub flat: Vec<f64>,
    /// Hash of the names and shapes the flat vector was gathered from.
    pub manifest_hash: String,
    /// Set when the trajectory had no trained tokens of `role`.
    pub empty: bool,
}

impl GradientSnapshot {
    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.flat.iter().all(|g| *g == 0.0)
    }
}

fn role_variant(role: Role) -> Result<MaskVariant> {
    match role {
        Role::Reasoning => Ok(MaskVariant::Reas),
        Role::Tool => Ok(MaskVariant::Tool),
        Role::Env => Err(Error::Unknown {
            kind: "gradient role",
            name: role.to_string(),
        }),
    }
}

/// Gradient of the policy-gradient objective restricted to `role`-labeled
/// tokens, gathered over `params` (all trainable parameters when `None`).
/// Works on a copy; `model` is untouched.
pub fn role_gradient(
    model: &PolicyModel,
    trajectory: usize,
    tokens: &[TokenId],
    prompt_len: usize,
    role: Role,
    advantage: f64,
    params: Option<&[ParamId]>,
) -> Result<GradientSnapshot> {
    // A dual-adapter model routes by generation role, so gate the same way.
    let variant = role_variant(role)?;
    let target = if model.adapter(AdapterSlot::Tool).is_some() {
        Target::Dart(variant)
    } else {
        Target::Masked(variant)
    };
    let ids = params.map(<[ParamId]>::to_vec).unwrap_or_else(|| model.trainable_ids());
    let empty = !token_mask(tokens, prompt_len, model.grammar(), target).contains(&true);
    let mut work = model.clone();
    work.store_mut().zero_grad();
    if !empty {
        let item = Scored {
            tokens,
            prompt_len,
            advantage,
        };
        accumulate_pg_grad(&mut work, None, &[item], 1, target, 0.0)?;
    }
    Ok(GradientSnapshot {
        role,
        trajectory,
        flat: work.store().flat_grad(&ids),
        manifest_hash: model.store().manifest_hash(&ids),
        empty,
    })
}

pub fn cosine(g1: &GradientSnapshot, g2: &GradientSnapshot) -> Result<f64> {
    if g1.manifest_hash != g2.manifest_hash || g1.flat.len() != g2.flat.len() {
        return Err(Error::contract("gradients come from different parameter sets"));
    }
    let (n1, n2) = (g1.norm(), g2.norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedAngle(format!(
            "zero {} gradient on trajectory {}",
            if n1 == 0.0 { g1.role } else { g2.role },
            if n1 == 0.0 { g1.trajectory } else { g2.trajectory }
        )));
    }
    let dot: f64 = g1.flat.iter().zip(&g2.flat).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Angle in `[0, π]`.
pub fn angle(g1: &GradientSnapshot, g2: &GradientSnapshot) -> Result<f64> {
    Ok(cosine(g1, g2)?.acos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    CrossRole,
    SameRoleR,
    SameRoleA,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub pair_type: PairType,
    pub traj_i: usize,
    pub traj_j: usize,
    pub angle_rad: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub rollouts: usize,
    pub pairs: Vec<AnglePair>,
    /// Pairs dropped because one side was a zero vector.
    pub skipped: usize,
    pub mean_cross_role: Option<f64>,
    pub mean_same_role_r: Option<f64>,
    pub mean_same_role_a: Option<f64>,
}

fn mean_of(pairs: &[AnglePair], t: PairType) -> Option<f64> {
    let xs: Vec<f64> = pairs.iter().filter(|p| p.pair_type == t).map(|p| p.angle_rad).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Angle statistics over already-sampled trajectories, with advantage 1.
pub fn conflict_report_from(model: &PolicyModel, records: &[EpisodeRecord]) -> Result<ConflictReport> {
    if records.len() < 2 {
        return Err(Error::contract("conflict report needs at least two rollouts"));
    }
    let mut reas = Vec::new();
    let mut tool = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        reas.push(role_gradient(
            model,
            i,
            &rec.tokens,
            rec.prompt_len,
            Role::Reasoning,
            1.0,
            None,
        )?);
        tool.push(role_gradient(
            model,
            i,
            &rec.tokens,
            rec.prompt_len,
            Role::Tool,
            1.0,
            None,
        )?);
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let mut push = |t: PairType, a: &GradientSnapshot, b: &GradientSnapshot| -> Result<()> {
        match cosine(a, b) {
            Ok(c) => pairs.push(AnglePair {
                pair_type: t,
                traj_i: a.trajectory,
                traj_j: b.trajectory,
                angle_rad: c.acos(),
                cosine: c,
            }),
            Err(Error::UndefinedAngle(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    };
    for i in 0..records.len() {
        push(PairType::CrossRole, &reas[i], &tool[i])?;
    }
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            push(PairType::SameRoleR, &reas[i], &reas[j])?;
            push(PairType::SameRoleA, &tool[i], &tool[j])?;
        }
    }
    Ok(ConflictReport {
        rollouts: records.len(),
        mean_cross_role: mean_of(&pairs, PairType::CrossRole),
        mean_same_role_r: mean_of(&pairs, PairType::SameRoleR),
        mean_same_role_a: mean_of(&pairs, PairType::SameRoleA),
        pairs,
        skipped,
    })
}

/// Samples `rollouts` trajectories, cycling through `questions`, and
/// reports their gradient angles.
pub fn conflict_report(
    model: &PolicyModel,
    corpus: &Corpus,
    questions: &[&Question],
    rollouts: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<ConflictReport> {
    if questions.is_empty() {
        return Err(Error::contract("conflict report needs questions"));
    }
    let agent = ModelAgent::new(model);
    let per_question = rollouts.div_ceil(questions.len());
    let mut records = evaluate(&agent as &dyn Agent, corpus, questions, cfg, per_question, seed)?;
    // Interleave so a short run still covers several questions.
    let mut ordered = Vec::with_capacity(rollouts);
    for s in 0..per_question {
        for q in 0..questions.len() {
            ordered.push(q * per_question + s);
        }
    }
    let picked: Vec<EpisodeRecord> = ordered
        .into_iter()
        .take(rollouts)
        .map(|i| std::mem::replace(&mut records[i], placeholder()))
        .collect();
    conflict_report_from(model, &picked)
}

fn placeholder() -> EpisodeRecord {
    EpisodeRecord {
        question_id: 0,
        prompt_len: 0,
        tokens: vec![],
        roles: vec![],
        tool_calls: vec![],
        answer: None,
        gold_answer: vec![],
        reward: 0.0,
        end: crate::toolenv::EndReason::MaxSeq,
    }
}

pub fn write_angles(report: &ConflictReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if report.pairs.is_empty() {
        w.write_record(["pair_type", "traj_i", "traj_j", "angle_rad", "cosine"])
            .map_err(csv_error)?;
    }
    for p in &report.pairs {
        w.serialize(p).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of the constructed two-target case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstructedConflict {
    pub cosine: f64,
    pub angle: f64,
    /// `-1/(V-1)`, the closed form at zero weights.
    pub expected_cosine: f64,
}

/// A one-layer linear policy `logits = W x` with `W = 0`, and two
/// trajectories sharing the context `x`: one whose reasoning token is
/// `reasoning_target`, one whose tool token is `tool_target`. The
/// log-likelihood gradients are `(e_c - p) x^T` with `p` uniform, so their
/// cosine is `-1/(V-1)` whenever the targets differ.
pub fn constructed_conflict(
    vocab_size: usize,
    reasoning_target: usize,
    tool_target: usize,
) -> Result<ConstructedConflict> {
    if vocab_size < 2 || reasoning_target >= vocab_size || tool_target >= vocab_size {
        return Err(Error::contract(
            "targets must be distinct tokens of a vocabulary of at least two",
        ));
    }
    if reasoning_target == tool_target {
        return Err(Error::contract("conflict needs two different targets"));
    }
    let dim = 3;
    let mut store = ParamStore::new();
    let w = store.register("w", Tensor::zeros(&[dim, vocab_size]), true);
    let context = Tensor::new(vec![1, dim], vec![1.0, -0.5, 0.25])?;
    let grad_for = |store: &mut ParamStore, role: Role, target: usize, traj: usize| -> Result<GradientSnapshot> {
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.constant(context.clone());
        let wv = tape.param(store, w);
        let logits = tape.matmul(x, wv)?;
        let lp = tape.log_softmax_rows(logits);
        let picked = tape.gather_weighted_sum(lp, &[target], &[1.0])?;
        tape.backward(picked, store)?;
        Ok(GradientSnapshot {
            role,
            trajectory: traj,
            flat: store.flat_grad(&[w]),
            manifest_hash: store.manifest_hash(&[w]),
            empty: false,
        })
    };
    let gr = grad_for(&mut store, Role::Reasoning, reasoning_target, 0)?;
    let ga = grad_for(&mut store, Role::Tool, tool_target, 1)?;
    let c = cosine(&gr, &ga)?;
    Ok(ConstructedConflict {
        cosine: c,
        angle: c.acos(),
        expected_cosine: -1.0 / (vocab_size as f64 - 1.0),
    })
}
