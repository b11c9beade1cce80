use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AdapterLayout, AdapterSlot, PolicyConfig};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::router::{Role, SegmentGrammar, TokenId};

pub(crate) const RMS_EPS: f64 = 1e-8;

/// Projection inside one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Down];

    fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }
}

/// A linear layer a low-rank adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Block(usize, Proj),
    Head,
}

impl Site {
    fn index(self) -> usize {
        match self {
            Site::Block(l, p) => l * Proj::ALL.len() + Proj::ALL.iter().position(|x| *x == p).unwrap(),
            Site::Head => usize::MAX,
        }
    }

    fn name(self) -> String {
        match self {
            Site::Block(l, p) => format!("layer{l}.{}", p.name()),
            Site::Head => "head".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub weights: [ParamId; 6],
}

#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub head: ParamId,
}

/// `B: out×r`, `A: r×in`; contribution `B·A·h`.
#[derive(Debug, Clone, Copy)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
}

/// One named low-rank adapter across every linear layer.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub slot: AdapterSlot,
    pub rank: usize,
    /// Indexed by block site, head last.
    pub(crate) factors: Vec<LoraFactors>,
}

impl AdapterSet {
    pub(crate) fn at(&self, site: Site) -> LoraFactors {
        match site {
            Site::Head => *self.factors.last().unwrap(),
            s => self.factors[s.index()],
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.factors.iter().flat_map(|f| [f.a, f.b]).collect()
    }
}

/// Which adapter (by index into [`PolicyModel::adapters`]) serves each role.
/// `None` runs that role on the backbone alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoleMap {
    pub reasoning: Option<usize>,
    pub tool: Option<usize>,
}

impl RoleMap {
    pub fn adapter_for(&self, role: Role) -> Option<usize> {
        match role {
            Role::Reasoning => self.reasoning,
            Role::Tool => self.tool,
            Role::Env => None,
        }
    }

    pub fn uniform(adapter: Option<usize>) -> Self {
        RoleMap {
            reasoning: adapter,
            tool: adapter,
        }
    }
}

/// How adapters are applied during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Backbone only, no adapter contribution.
    Backbone,
    /// The same adapter for every position.
    Single(AdapterSlot),
    /// Position `t` is computed entirely under the adapter mapped from
    /// `roles[t]`; env positions run on the backbone.
    PerToken(&'a [Role], RoleMap),
}

/// Frozen-able transformer backbone plus named low-rank adapters.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub(crate) config: PolicyConfig,
    pub(crate) grammar: SegmentGrammar,
    pub(crate) store: ParamStore,
    pub(crate) backbone: Backbone,
    pub(crate) adapters: Vec<AdapterSet>,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("finite std");
        t.data_mut().iter_mut().for_each(|v| *v = n.sample(rng));
    }
    t
}

impl PolicyModel {
    /// Fresh randomly initialized model. Adapters start with `B = 0`.
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, grammar: SegmentGrammar, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.dim);
        let mut store = ParamStore::new();
        let tok_emb = store.register("backbone.tok_emb", normal_tensor(rng, &[v, d], 1.0), true);
        let pos_emb = store.register("backbone.pos_emb", normal_tensor(rng, &[config.max_seq, d], 0.5), true);
        let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut weights = Vec::with_capacity(6);
            for p in Proj::ALL {
                let (out, inp) = Self::proj_shape(&config, p);
                let mut std = 1.0 / (inp as f64).sqrt();
                if matches!(p, Proj::O | Proj::Down) {
                    std *= resid_scale;
                }
                let id = store.register(
                    format!("backbone.{}", Site::Block(l, p).name()),
                    normal_tensor(rng, &[out, inp], std),
                    true,
                );
                weights.push(id);
            }
            blocks.push(Block {
                weights: weights.try_into().unwrap(),
            });
        }
        let head = store.register(
            "backbone.head",
            normal_tensor(rng, &[v, d], 1.0 / (d as f64).sqrt()),
            true,
        );
        let backbone = Backbone {
            tok_emb,
            pos_emb,
            blocks,
            head,
        };
        let mut model = PolicyModel {
            config: PolicyConfig {
                adapters: AdapterLayout::None,
                ..config.clone()
            },
            grammar,
            store,
            backbone,
            adapters: vec![],
        };
        model.attach_adapters(config.adapters, rng)?;
        Ok(model)
    }

    /// Copy of this model's backbone carrying freshly initialized adapters
    /// of `layout` (replacing any existing ones). The backbone is frozen iff
    /// `layout` has adapters.
    pub fn with_adapters<R: Rng + ?Sized>(&self, layout: AdapterLayout, rng: &mut R) -> Result<Self> {
        let config = self.config.with_adapters(layout);
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone_ids = self.backbone_ids();
        for id in &backbone_ids {
            let p = self.store.get(*id);
            store.register(p.name.clone(), p.value.clone(), true);
        }
        // Backbone ids are registered first, so their indices carry over.
        let mut model = PolicyModel {
            config: self.config.with_adapters(AdapterLayout::None),
            grammar: self.grammar,
            store,
            backbone: self.backbone.clone(),
            adapters: vec![],
        };
        model.attach_adapters(layout, rng)?;
        Ok(model)
    }

    fn attach_adapters<R: Rng + ?Sized>(&mut self, layout: AdapterLayout, rng: &mut R) -> Result<()> {
        for (slot, rank) in layout.slots() {
            let mut factors = Vec::new();
            let sites: Vec<Site> = (0..self.config.layers)
                .flat_map(|l| Proj::ALL.map(|p| Site::Block(l, p)))
                .chain(std::iter::once(Site::Head))
                .collect();
            for site in sites {
                let (out, inp) = self.site_shape(site);
                let std = self.config.adapter_init_scale / (inp as f64).sqrt();
                let prefix = format!("adapter.{}.{}", slot.name(), site.name());
                let a = self
                    .store
                    .register(format!("{prefix}.A"), normal_tensor(rng, &[rank, inp], std), true);
                let b = self
                    .store
                    .register(format!("{prefix}.B"), Tensor::zeros(&[out, rank]), true);
                factors.push(LoraFactors { a, b });
            }
            self.adapters.push(AdapterSet { slot, rank, factors });
        }
        self.config.adapters = layout;
        if !self.adapters.is_empty() {
            self.freeze_backbone();
        }
        Ok(())
    }

    fn proj_shape(config: &PolicyConfig, p: Proj) -> (usize, usize) {
        let (d, h) = (config.dim, config.mlp_hidden);
        match p {
            Proj::Q | Proj::K | Proj::V | Proj::O => (d, d),
            Proj::Up => (h, d),
            Proj::Down => (d, h),
        }
    }

    fn site_shape(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Block(_, p) => Self::proj_shape(&self.config, p),
            Site::Head => (self.config.vocab_size, self.config.dim),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn grammar(&self) -> &SegmentGrammar {
        &self.grammar
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapters(&self) -> &[AdapterSet] {
        &self.adapters
    }

    pub fn adapter_index(&self, slot: AdapterSlot) -> Option<usize> {
        self.adapters.iter().position(|a| a.slot == slot)
    }

    pub fn adapter(&self, slot: AdapterSlot) -> Option<&AdapterSet> {
        self.adapters.iter().find(|a| a.slot == slot)
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let b = &self.backbone;
        let mut ids = vec![b.tok_emb, b.pos_emb];
        for blk in &b.blocks {
            ids.extend_from_slice(&blk.weights);
        }
        ids.push(b.head);
        ids
    }

    pub fn freeze_backbone(&mut self) {
        for id in self.backbone_ids() {
            self.store.set_requires_grad(id, false);
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_ids().iter().all(|id| !self.store.get(*id).requires_grad)
    }

    /// Trainable parameters in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids()
            .iter()
            .map(|id| self.store.get(*id).value.numel())
            .sum()
    }

    pub fn backbone_count(&self) -> usize {
        self.backbone_ids()
            .iter()
            .map(|id| self.store.get(*id).value.numel())
            .sum()
    }

    /// Role map this model uses when generating: per-role adapters for a
    /// dual layout, the shared adapter for both roles in a single layout.
    pub fn default_role_map(&self) -> RoleMap {
        match self.config.adapters {
            AdapterLayout::None => RoleMap::default(),
            AdapterLayout::Single { .. } => RoleMap::uniform(self.adapter_index(AdapterSlot::Shared)),
            AdapterLayout::Dual { .. } => RoleMap {
                reasoning: self.adapter_index(AdapterSlot::Reasoning),
                tool: self.adapter_index(AdapterSlot::Tool),
            },
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Per-position adapter choice for `routing`.
    pub(crate) fn resolve(&self, routing: Routing<'_>, len: usize) -> Result<Vec<Option<usize>>> {
        match routing {
            Routing::Backbone => Ok(vec![None; len]),
            Routing::Single(slot) => {
                let idx = self.adapter_index(slot).ok_or_else(|| Error::Unknown {
                    kind: "adapter",
                    name: slot.name().to_string(),
                })?;
                Ok(vec![Some(idx); len])
            }
            Routing::PerToken(roles, map) => {
                if roles.len() != len {
                    return Err(Error::contract(format!(
                        "routing length {} does not match token length {len}",
                        roles.len()
                    )));
                }
                for idx in [map.reasoning, map.tool].into_iter().flatten() {
                    if idx >= self.adapters.len() {
                        return Err(Error::Unknown {
                            kind: "adapter index",
                            name: idx.to_string(),
                        });
                    }
                }
                Ok(roles.iter().map(|&r| map.adapter_for(r)).collect())
            }
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, site: Site, adapter: Option<usize>) -> Result<Var> {
        let w = match site {
            Site::Block(l, p) => self.backbone.blocks[l].weights[Proj::ALL.iter().position(|q| *q == p).unwrap()],
            Site::Head => self.backbone.head,
        };
        let wv = tape.param(&self.store, w);
        let y = tape.matmul_t(x, wv)?;
        match adapter {
            None => Ok(y),
            Some(i) => {
                let f = self.adapters[i].at(site);
                let (av, bv) = (tape.param(&self.store, f.a), tape.param(&self.store, f.b));
                let low = tape.matmul_t(x, av)?;
                let delta = tape.matmul_t(low, bv)?;
                tape.add(y, delta)
            }
        }
    }

    /// Logits for `inputs` with every position computed under one adapter
    /// choice. Row `t` is the next-token distribution after `inputs[..=t]`.
    pub fn forward_stream(&self, tape: &mut Tape, inputs: &[TokenId], adapter: Option<usize>) -> Result<Var> {
        self.check_tokens(inputs)?;
        let c = &self.config;
        let n = inputs.len();
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let te = tape.param(&self.store, self.backbone.tok_emb);
        let pe = tape.param(&self.store, self.backbone.pos_emb);
        let tok = tape.embedding(te, &ids)?;
        let pos = tape.embedding(pe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.layers {
            let h = tape.rms_norm_rows(x, RMS_EPS);
            let q = self.linear(tape, h, Site::Block(l, Proj::Q), adapter)?;
            let k = self.linear(tape, h, Site::Block(l, Proj::K), adapter)?;
            let v = self.linear(tape, h, Site::Block(l, Proj::V), adapter)?;
            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_t(qh, kh)?;
                let s = tape.scale(s, scale);
                let s = tape.causal_mask(s)?;
                let p = tape.softmax_rows(s);
                heads.push(tape.matmul(p, vh)?);
            }
            let o = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let o = self.linear(tape, o, Site::Block(l, Proj::O), adapter)?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm_rows(x, RMS_EPS);
            let u = self.linear(tape, h, Site::Block(l, Proj::Up), adapter)?;
            let u = tape.silu(u);
            let dn = self.linear(tape, u, Site::Block(l, Proj::Down), adapter)?;
            x = tape.add(x, dn)?;
        }
        let h = tape.rms_norm_rows(x, RMS_EPS);
        self.linear(tape, h, Site::Head, adapter)
    }

    /// `T × V` next-token logits for `tokens` under `routing`.
    pub fn forward_logits(&self, tokens: &[TokenId], routing: Routing<'_>) -> Result<Tensor> {
        let choice = self.resolve(routing, tokens.len())?;
        let v = self.config.vocab_size;
        let mut out = Tensor::zeros(&[tokens.len(), v]);
        let mut streams: Vec<Option<usize>> = choice.clone();
        streams.sort();
        streams.dedup();
        for s in streams {
            let mut tape = Tape::new();
            let logits = self.forward_stream(&mut tape, tokens, s)?;
            let lt = tape.value(logits);
            for (t, c) in choice.iter().enumerate() {
                if *c == s {
                    out.data_mut()[t * v..(t + 1) * v].copy_from_slice(lt.row(t));
                }
            }
        }
        Ok(out)
    }

    /// Model inputs for scoring `tokens`: BOS followed by all but the last.
    pub fn shifted_inputs(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(tokens.len());
        inputs.push(self.config.bos_token);
        inputs.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        inputs
    }

    /// `log π(tokens[t] | BOS, tokens[..t])` for every `t`. `routing`
    /// indexes target positions.
    pub fn token_log_probs(&self, tokens: &[TokenId], routing: Routing<'_>) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let inputs = self.shifted_inputs(tokens);
        let logits = self.forward_logits(&inputs, routing)?;
        let v = self.config.vocab_size;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let mut row = logits.data()[t * v..(t + 1) * v].to_vec();
                crate::autodiff::kernels::log_softmax_in_place(&mut row);
                row[tok as usize]
            })
            .collect())
    }

    /// Like [`PolicyModel::token_log_probs`] but only evaluates the streams
    /// needed for `active` positions; inactive entries are `NaN`.
    pub fn token_log_probs_at(&self, tokens: &[TokenId], routing: Routing<'_>, active: &[bool]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let routed = self.routed_log_probs(&mut tape, tokens, routing, active)?;
        Ok(routed.values(&tape))
    }

    /// Records the routed log-probabilities of `tokens` on `tape`, building
    /// only the adapter streams needed for positions where `active` is set.
    pub fn routed_log_probs(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        routing: Routing<'_>,
        active: &[bool],
    ) -> Result<RoutedLogProbs> {
        self.check_tokens(tokens)?;
        if active.len() != tokens.len() {
            return Err(Error::contract(format!(
                "mask length {} does not match trajectory length {}",
                active.len(),
                tokens.len()
            )));
        }
        let choice = self.resolve(routing, tokens.len())?;
        let inputs = self.shifted_inputs(tokens);
        let mut needed: Vec<Option<usize>> = choice
            .iter()
            .zip(active)
            .filter(|(_, a)| **a)
            .map(|(c, _)| *c)
            .collect();
        needed.sort();
        needed.dedup();
        let mut streams = Vec::with_capacity(needed.len());
        for s in needed {
            let logits = self.forward_stream(tape, &inputs, s)?;
            streams.push((s, tape.log_softmax_rows(logits)));
        }
        Ok(RoutedLogProbs {
            streams,
            choice,
            active: active.to_vec(),
            targets: tokens.iter().map(|&t| t as usize).collect(),
        })
    }
}

/// Log-probability streams for one trajectory, recorded on a tape.
#[derive(Debug)]
pub struct RoutedLogProbs {
    streams: Vec<(Option<usize>, Var)>,
    choice: Vec<Option<usize>>,
    active: Vec<bool>,
    targets: Vec<usize>,
}

impl RoutedLogProbs {
    /// `log π` of each target; `NaN` where the position is inactive.
    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.targets.len()];
        for (s, var) in &self.streams {
            let lp = tape.value(*var);
            for (t, o) in out.iter_mut().enumerate() {
                if self.active[t] && self.choice[t] == *s {
                    *o = lp.row(t)[self.targets[t]];
                }
            }
        }
        out
    }

    /// `Σ_t weights[t] · log π(target_t)` over active positions, or `None`
    /// when no stream was needed.
    pub fn weighted_sum(&self, tape: &mut Tape, weights: &[f64]) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (s, var) in &self.streams {
            let w: Vec<f64> = (0..self.targets.len())
                .map(|t| {
                    if self.active[t] && self.choice[t] == *s {
                        weights[t]
                    } else {
                        0.0
                    }
                })
                .collect();
            let part = tape.gather_weighted_sum(*var, &self.targets, &w)?;
            total = Some(match total {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
        }
        Ok(total)
    }

    pub fn stream_adapters(&self) -> Vec<Option<usize>> {
        self.streams.iter().map(|(s, _)| *s).collect()
    }
}
