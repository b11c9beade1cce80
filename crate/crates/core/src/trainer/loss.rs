use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Routing};
use crate::router::{generation_roles, label_tokens, MaskVariant, Role, SegmentGrammar, TokenId};

/// What a policy-gradient update trains.
///
/// `Masked` gates tokens by span label, so `<search>` counts as a tool
/// token. `Dart` gates by the role that generated each token, which is also
/// the adapter the token is routed through; this makes the two adapters'
/// gradients disjoint by construction. In both cases env-labeled tokens
/// are never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Target {
    Masked(MaskVariant),
    Dart(MaskVariant),
}

impl Target {
    pub const DART: Target = Target::Dart(MaskVariant::Unified);

    pub fn variant(self) -> MaskVariant {
        match self {
            Target::Masked(v) | Target::Dart(v) => v,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.variant() {
            MaskVariant::Reas => "reas",
            MaskVariant::Tool => "tool",
            MaskVariant::Unified => "unified",
        };
        match self {
            Target::Dart(MaskVariant::Unified) => f.write_str("dart"),
            Target::Dart(_) => write!(f, "dart-{v}"),
            Target::Masked(_) => f.write_str(v),
        }
    }
}

impl TryFrom<String> for Target {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Target> for String {
    fn from(t: Target) -> String {
        t.to_string()
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if s == "dart" {
            return Ok(Target::DART);
        }
        if let Some(rest) = s.strip_prefix("dart-") {
            return Ok(Target::Dart(rest.parse()?));
        }
        Ok(Target::Masked(s.parse()?))
    }
}

/// Per-token gates `m_t` for a trajectory. Prompt tokens are never trained.
pub fn token_mask(tokens: &[TokenId], prompt_len: usize, grammar: &SegmentGrammar, target: Target) -> Vec<bool> {
    let labels = label_tokens(tokens, grammar);
    let gates: Vec<Role> = match target {
        Target::Masked(_) => labels.clone(),
        Target::Dart(_) => generation_roles(tokens, grammar),
    };
    let variant = target.variant();
    (0..tokens.len())
        .map(|t| t >= prompt_len && labels[t] != Role::Env && variant.keeps(gates[t]))
        .collect()
}

/// One trajectory with its advantage, ready for the loss.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub tokens: &'a [TokenId],
    pub prompt_len: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Mean of `log pi - log pi_ref` over trained tokens.
    pub kl: f64,
    pub tokens: usize,
}

/// Accumulates into `model`'s gradient buffers the gradient of
///
/// `L = -(1/G) sum_i sum_t m_t (A_i - beta (log pi - log pi_ref)) log pi(c_t)`
///
/// with the bracket held constant, where `G = batch_size` (the size of the
/// full batch, so microbatches can be summed). Returns the loss value and
/// the KL estimate. Does not zero gradients.
pub fn accumulate_pg_grad(
    model: &mut PolicyModel,
    reference: Option<&PolicyModel>,
    batch: &[Scored<'_>],
    batch_size: usize,
    target: Target,
    beta: f64,
) -> Result<LossStats> {
    if beta < 0.0 {
        return Err(Error::contract("kl beta must be >= 0"));
    }
    if beta > 0.0 && reference.is_none() {
        return Err(Error::contract("a positive kl beta needs a reference model"));
    }
    if let Some(r) = reference {
        if r.config() != model.config() {
            return Err(Error::contract("reference model config differs from the policy"));
        }
    }
    let g = batch_size.max(1) as f64;
    let grammar = *model.grammar();
    let map = model.default_role_map();
    let mut stats = LossStats::default();
    let mut kl_sum = 0.0;
    for item in batch {
        let active = token_mask(item.tokens, item.prompt_len, &grammar, target);
        if !active.iter().any(|a| *a) {
            continue;
        }
        let roles = generation_roles(item.tokens, &grammar);
        let routing = Routing::PerToken(&roles, map);
        let mut tape = Tape::new();
        let routed = model.routed_log_probs(&mut tape, item.tokens, routing, &active)?;
        let lp = routed.values(&tape);
        let lp_ref = match reference {
            Some(r) if beta > 0.0 => r.token_log_probs_at(item.tokens, routing, &active)?,
            _ => lp.clone(),
        };
        let mut weights = vec![0.0; item.tokens.len()];
        for t in 0..item.tokens.len() {
            if active[t] {
                let log_ratio = lp[t] - lp_ref[t];
                let coef = item.advantage - beta * log_ratio;
                weights[t] = -coef / g;
                stats.loss += -coef * lp[t] / g;
                kl_sum += log_ratio;
                stats.tokens += 1;
            }
        }
        if let Some(loss) = routed.weighted_sum(&mut tape, &weights)? {
            tape.backward(loss, model.store_mut())?;
        }
    }
    stats.kl = if stats.tokens > 0 {
        kl_sum / stats.tokens as f64
    } else {
        0.0
    };
    Ok(stats)
}

/// Mean negative log-likelihood over `tokens` at positions where `active`
/// holds, under `routing`; gradients are accumulated scaled by `1/norm`.
pub fn accumulate_nll_grad(
    model: &mut PolicyModel,
    tokens: &[TokenId],
    active: &[bool],
    routing: Routing<'_>,
    norm: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let routed = model.routed_log_probs(&mut tape, tokens, routing, active)?;
    let lp = routed.values(&tape);
    let weights: Vec<f64> = active.iter().map(|a| if *a { -1.0 / norm } else { 0.0 }).collect();
    let loss: f64 = lp.iter().zip(active).filter(|(_, a)| **a).map(|(l, _)| -l / norm).sum();
    if let Some(v) = routed.weighted_sum(&mut tape, &weights)? {
        tape.backward(v, model.store_mut())?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_names_round_trip() {
        for s in ["dart", "dart-reas", "dart-tool", "reas", "tool", "unified"] {
            let t: Target = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("both".parse::<Target>().is_err());
    }

    #[test]
    fn masks_skip_prompt_and_env() {
        let g = SegmentGrammar::default();
        // Q1 k <search> k </search> <information> k is v </information> <answer> v </answer>
        let toks = [10, 12, 3, 12, 4, 5, 12, 9, 52, 6, 7, 52, 8];
        let uni = token_mask(&toks, 2, &g, Target::Masked(MaskVariant::Unified));
        assert_eq!(
            uni,
            [false, false, true, true, true, false, false, false, false, false, true, true, true]
        );
        let tool = token_mask(&toks, 2, &g, Target::Masked(MaskVariant::Tool));
        assert_eq!(tool.iter().filter(|x| **x).count(), 3);
        // Under routing roles the opener belongs to the reasoning side.
        let dart_tool = token_mask(&toks, 2, &g, Target::Dart(MaskVariant::Tool));
        assert_eq!(dart_tool.iter().filter(|x| **x).count(), 2);
        assert!(!dart_tool[2]);
    }
}
