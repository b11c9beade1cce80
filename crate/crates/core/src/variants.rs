//! The six attribution variants plus the disentangled dual-adapter model.
//!
//! Variants differ only in which token roles were trained and whether the
//! two abilities share parameters:
//!
//! | kind      | trained on           | composition                  |
//! |-----------|----------------------|------------------------------|
//! | base      | nothing              | pretrained backbone          |
//! | m_reas    | reasoning tokens     | one shared adapter           |
//! | m_tool    | tool tokens          | one shared adapter           |
//! | m_unified | both                 | one shared adapter           |
//! | h_tool    | n/a                  | base reasons, m_tool acts    |
//! | h_reas    | n/a                  | m_reas reasons, base acts    |
//! | dart      | both                 | disjoint routed adapters     |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{AdapterLayout, AdapterSlot, PolicyModel, RoleMap};
use crate::router::{MaskVariant, Role, TokenId};
use crate::toolenv::{evaluate, mean_reward, Agent, AgentState, Corpus, EpisodeConfig, ModelAgent, Question};
use crate::trainer::{train, Target, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Base,
    MReas,
    MTool,
    MUnified,
    HTool,
    HReas,
    Dart,
}

impl VariantKind {
    /// The six variants of the attribution design, in design-matrix order.
    pub const LEAS: [VariantKind; 6] = [
        VariantKind::Base,
        VariantKind::HTool,
        VariantKind::HReas,
        VariantKind::MTool,
        VariantKind::MReas,
        VariantKind::MUnified,
    ];

    pub const ALL: [VariantKind; 7] = [
        VariantKind::Base,
        VariantKind::MReas,
        VariantKind::MTool,
        VariantKind::MUnified,
        VariantKind::HTool,
        VariantKind::HReas,
        VariantKind::Dart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Base => "base",
            VariantKind::MReas => "m_reas",
            VariantKind::MTool => "m_tool",
            VariantKind::MUnified => "m_unified",
            VariantKind::HTool => "h_tool",
            VariantKind::HReas => "h_reas",
            VariantKind::Dart => "dart",
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, VariantKind::HTool | VariantKind::HReas)
    }

    /// Mask a trained single-adapter variant uses.
    pub fn mask(self) -> Option<MaskVariant> {
        match self {
            VariantKind::MReas => Some(MaskVariant::Reas),
            VariantKind::MTool => Some(MaskVariant::Tool),
            VariantKind::MUnified => Some(MaskVariant::Unified),
            _ => None,
        }
    }

    pub fn capabilities(self) -> CapabilityVector {
        let x = match self {
            VariantKind::Base => [1, 0, 0, 0, 0, 0],
            VariantKind::HTool => [1, 1, 0, 0, 0, 0],
            VariantKind::HReas => [1, 0, 1, 0, 0, 0],
            VariantKind::MTool => [1, 1, 0, 1, 0, 0],
            VariantKind::MReas => [1, 0, 1, 0, 1, 0],
            VariantKind::MUnified => [1, 1, 1, 1, 1, 1],
            // Both abilities trained against the base, never jointly.
            VariantKind::Dart => [1, 1, 1, 1, 1, 0],
        };
        CapabilityVector(x)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(Error::Unknown {
                kind: "variant",
                name: s,
            })
    }
}

/// Indicators `(x1, x2, x3, x12, x13, x23)`: base, tool, reasoning, and
/// whether each pair was trained jointly in the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityVector(pub [u8; 6]);

impl CapabilityVector {
    /// Each interaction bit implies both of its main-effect bits.
    pub fn is_consistent(&self) -> bool {
        let x = self.0;
        x.iter().all(|b| *b <= 1)
            && (x[3] == 0 || (x[0] == 1 && x[1] == 1))
            && (x[4] == 0 || (x[0] == 1 && x[2] == 1))
            && (x[5] == 0 || (x[1] == 1 && x[2] == 1))
    }

    pub fn as_f64(&self) -> [f64; 6] {
        self.0.map(f64::from)
    }
}

/// Rows are the capability vectors of [`VariantKind::LEAS`] in order.
pub fn design_matrix() -> [[f64; 6]; 6] {
    VariantKind::LEAS.map(|k| k.capabilities().as_f64())
}

/// Trained models behind every variant. Hybrids borrow two of them.
#[derive(Debug, Clone)]
pub struct VariantSet {
    pub base: PolicyModel,
    pub m_reas: Option<PolicyModel>,
    pub m_tool: Option<PolicyModel>,
    pub m_unified: Option<PolicyModel>,
    pub dart: Option<PolicyModel>,
    /// Variants whose training diverged.
    pub failed: Vec<VariantKind>,
}

impl VariantSet {
    pub fn model(&self, kind: VariantKind) -> Option<&PolicyModel> {
        match kind {
            VariantKind::Base => Some(&self.base),
            VariantKind::MReas => self.m_reas.as_ref(),
            VariantKind::MTool => self.m_tool.as_ref(),
            VariantKind::MUnified => self.m_unified.as_ref(),
            VariantKind::Dart => self.dart.as_ref(),
            VariantKind::HTool | VariantKind::HReas => None,
        }
    }

    /// Which models a kind is made of, as (reasoning, tool).
    pub fn parts(kind: VariantKind) -> (VariantKind, VariantKind) {
        match kind {
            VariantKind::HTool => (VariantKind::Base, VariantKind::MTool),
            VariantKind::HReas => (VariantKind::MReas, VariantKind::Base),
            k => (k, k),
        }
    }

    pub fn available(&self, kind: VariantKind) -> bool {
        let (r, t) = Self::parts(kind);
        self.model(r).is_some() && self.model(t).is_some()
    }

    pub fn agent(&self, kind: VariantKind) -> Result<Box<dyn Agent + '_>> {
        let missing = || Error::Unknown {
            kind: "trained variant",
            name: kind.name().to_string(),
        };
        if kind.is_hybrid() {
            let (r, t) = Self::parts(kind);
            let rm = self.model(r).ok_or_else(missing)?;
            let tm = self.model(t).ok_or_else(missing)?;
            Ok(Box::new(HybridAgent::new(
                Box::new(ModelAgent::new(rm)),
                Box::new(ModelAgent::new(tm)),
            )))
        } else {
            Ok(Box::new(ModelAgent::new(self.model(kind).ok_or_else(missing)?)))
        }
    }
}

/// Trains `kind`'s adapters on top of `base`, with the same adapter seed
/// and training config for every kind.
pub fn train_variant(
    base: &PolicyModel,
    corpus: &Corpus,
    kind: VariantKind,
    cfg: &TrainConfig,
    single_rank: usize,
    dual_ranks: (usize, usize),
) -> Result<(PolicyModel, TrainReport)> {
    let (layout, target) = match kind {
        VariantKind::Dart => (
            AdapterLayout::Dual {
                reasoning_rank: dual_ranks.0,
                tool_rank: dual_ranks.1,
            },
            Target::DART,
        ),
        k => match k.mask() {
            Some(m) => (AdapterLayout::Single { rank: single_rank }, Target::Masked(m)),
            None => {
                return Err(Error::contract(format!("{kind} is not a trained variant")));
            }
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = base.with_adapters(layout, &mut rng)?;
    let cfg = TrainConfig { target, ..cfg.clone() };
    let report = train(&mut model, corpus, &cfg)?;
    Ok((model, report))
}

/// Trains the three masked variants (and DART if asked). A variant whose
/// training diverges is recorded in `failed` and left out.
pub fn build_variants(
    base: &PolicyModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    single_rank: usize,
    dual_ranks: (usize, usize),
    with_dart: bool,
) -> Result<(VariantSet, Vec<(VariantKind, TrainReport)>)> {
    if !base.adapters().is_empty() {
        return Err(Error::contract("variants are built from a backbone-only checkpoint"));
    }
    let mut set = VariantSet {
        base: base.clone(),
        m_reas: None,
        m_tool: None,
        m_unified: None,
        dart: None,
        failed: vec![],
    };
    let mut reports = Vec::new();
    let mut kinds = vec![VariantKind::MReas, VariantKind::MTool, VariantKind::MUnified];
    if with_dart {
        kinds.push(VariantKind::Dart);
    }
    for kind in kinds {
        match train_variant(base, corpus, kind, cfg, single_rank, dual_ranks) {
            Ok((model, report)) => {
                let slot = match kind {
                    VariantKind::MReas => &mut set.m_reas,
                    VariantKind::MTool => &mut set.m_tool,
                    VariantKind::MUnified => &mut set.m_unified,
                    _ => &mut set.dart,
                };
                *slot = Some(model);
                reports.push((kind, report));
            }
            Err(Error::Diverged { .. }) => set.failed.push(kind),
            Err(e) => return Err(e),
        }
    }
    Ok((set, reports))
}

/// Inference-time composition: the reasoning agent produces every token
/// outside search spans (including the `<search>` opener, the decision to
/// call the tool); the tool agent produces the query and `</search>`.
///
/// Each side sees the full shared prefix but is only brought up to date
/// when it is asked for logits, so a side that is never consulted never
/// runs.
pub struct HybridAgent<'a> {
    reasoning: Box<dyn Agent + 'a>,
    tool: Box<dyn Agent + 'a>,
}

impl<'a> HybridAgent<'a> {
    pub fn new(reasoning: Box<dyn Agent + 'a>, tool: Box<dyn Agent + 'a>) -> Self {
        HybridAgent { reasoning, tool }
    }
}

struct Lazy<'s> {
    state: Box<dyn AgentState + 's>,
    pending: Vec<TokenId>,
}

impl Lazy<'_> {
    fn logits(&mut self, role: Role) -> Result<Vec<f64>> {
        for t in self.pending.drain(..) {
            self.state.push(t)?;
        }
        self.state.logits(role)
    }
}

struct HybridState<'s> {
    reasoning: Lazy<'s>,
    tool: Lazy<'s>,
}

impl AgentState for HybridState<'_> {
    fn push(&mut self, token: TokenId) -> Result<()> {
        self.reasoning.pending.push(token);
        self.tool.pending.push(token);
        Ok(())
    }

    fn logits(&mut self, role: Role) -> Result<Vec<f64>> {
        match role {
            Role::Tool => self.tool.logits(role),
            _ => self.reasoning.logits(role),
        }
    }
}

impl Agent for HybridAgent<'_> {
    fn begin(&self) -> Result<Box<dyn AgentState + '_>> {
        Ok(Box::new(HybridState {
            reasoning: Lazy {
                state: self.reasoning.begin()?,
                pending: vec![],
            },
            tool: Lazy {
                state: self.tool.begin()?,
                pending: vec![],
            },
        }))
    }

    fn max_seq(&self) -> usize {
        self.reasoning.max_seq().min(self.tool.max_seq())
    }
}

/// A dual-adapter model with only `which` role's adapter attached; the
/// other role's tokens run on the backbone.
pub fn single_ability_agent(model: &PolicyModel, which: Role) -> Result<ModelAgent<'_>> {
    let full = dart_role_map(model)?;
    let map = match which {
        Role::Reasoning => RoleMap {
            reasoning: full.reasoning,
            tool: None,
        },
        Role::Tool => RoleMap {
            reasoning: None,
            tool: full.tool,
        },
        Role::Env => {
            return Err(Error::Unknown {
                kind: "ability",
                name: which.to_string(),
            })
        }
    };
    Ok(ModelAgent::with_map(model, map))
}

/// Mean EM of [`single_ability_agent`].
pub fn dart_single_ability(
    model: &PolicyModel,
    which: Role,
    corpus: &Corpus,
    questions: &[&Question],
    cfg: &EpisodeConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let agent = single_ability_agent(model, which)?;
    Ok(mean_reward(&evaluate(&agent, corpus, questions, cfg, samples, seed)?))
}

fn dart_role_map(model: &PolicyModel) -> Result<RoleMap> {
    match (
        model.adapter_index(AdapterSlot::Reasoning),
        model.adapter_index(AdapterSlot::Tool),
    ) {
        (Some(r), Some(t)) => Ok(RoleMap {
            reasoning: Some(r),
            tool: Some(t),
        }),
        _ => Err(Error::contract("model does not carry dual adapters")),
    }
}

/// One registry line: where a variant's weights live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub kind: VariantKind,
    pub capabilities: CapabilityVector,
    /// One checkpoint, or (reasoning, tool) for hybrids.
    pub checkpoints: Vec<PathBuf>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub entries: Vec<RegistryEntry>,
}

pub const REGISTRY_FILE: &str = "variants.json";

fn checkpoint_name(kind: VariantKind) -> String {
    format!("{}.ckpt", kind.name())
}

impl VariantSet {
    /// Writes every available model plus `variants.json` into `dir`.
    /// Checkpoint paths in the registry are relative to `dir`.
    pub fn save(&self, dir: &Path) -> Result<Registry> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for kind in VariantKind::ALL {
            if kind == VariantKind::Dart && self.dart.is_none() && !self.failed.contains(&kind) {
                continue;
            }
            if let Some(m) = self.model(kind) {
                m.save(&dir.join(checkpoint_name(kind)))?;
            }
            let (r, t) = Self::parts(kind);
            let checkpoints = if kind.is_hybrid() {
                vec![checkpoint_name(r).into(), checkpoint_name(t).into()]
            } else {
                vec![checkpoint_name(kind).into()]
            };
            entries.push(RegistryEntry {
                kind,
                capabilities: kind.capabilities(),
                checkpoints,
                failed: !self.available(kind),
            });
        }
        let reg = Registry { entries };
        std::fs::write(dir.join(REGISTRY_FILE), serde_json::to_string_pretty(&reg)?)?;
        Ok(reg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let reg: Registry = serde_json::from_str(&std::fs::read_to_string(dir.join(REGISTRY_FILE))?)?;
        let load = |kind: VariantKind| -> Result<Option<PolicyModel>> {
            match reg.entries.iter().find(|e| e.kind == kind) {
                Some(e) if !e.failed => Ok(Some(PolicyModel::load(&dir.join(&e.checkpoints[0]))?)),
                _ => Ok(None),
            }
        };
        Ok(VariantSet {
            base: load(VariantKind::Base)?.ok_or_else(|| Error::contract("registry has no base checkpoint"))?,
            m_reas: load(VariantKind::MReas)?,
            m_tool: load(VariantKind::MTool)?,
            m_unified: load(VariantKind::MUnified)?,
            dart: load(VariantKind::Dart)?,
            failed: reg.entries.iter().filter(|e| e.failed).map(|e| e.kind).collect(),
        })
    }
}
