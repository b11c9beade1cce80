//! Tape-free incremental decoding with per-stream key/value caches.
//!
//! Each stream runs every position under one adapter choice, so a routed
//! model keeps one cache per adapter it may sample from.

use super::model::{PolicyModel, Proj, RoleMap, Site, RMS_EPS};
use crate::autodiff::kernels::{self, matvec_t};
use crate::error::{Error, Result};
use crate::router::{Role, TokenId};

#[derive(Debug, Clone)]
struct Stream {
    adapter: Option<usize>,
    /// Per layer, `len × dim` keys and values.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Incremental decoder over one model. Feed tokens with [`Decoder::push`];
/// read next-token logits per role with [`Decoder::logits`].
#[derive(Debug, Clone)]
pub struct Decoder<'m> {
    model: &'m PolicyModel,
    map: RoleMap,
    streams: Vec<Stream>,
    len: usize,
}

impl<'m> Decoder<'m> {
    /// Starts at BOS.
    pub fn new(model: &'m PolicyModel, map: RoleMap) -> Result<Self> {
        let mut adapters: Vec<Option<usize>> = vec![map.reasoning, map.tool];
        adapters.sort();
        adapters.dedup();
        for a in adapters.iter().flatten() {
            if *a >= model.adapters.len() {
                return Err(Error::Unknown {
                    kind: "adapter index",
                    name: a.to_string(),
                });
            }
        }
        let layers = model.config.layers;
        let streams = adapters
            .into_iter()
            .map(|adapter| Stream {
                adapter,
                keys: vec![Vec::new(); layers],
                values: vec![Vec::new(); layers],
                logits: vec![],
            })
            .collect();
        let mut d = Decoder {
            model,
            map,
            streams,
            len: 0,
        };
        d.advance(model.config.bos_token)?;
        Ok(d)
    }

    /// Tokens consumed after BOS.
    pub fn len(&self) -> usize {
        self.len - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len <= 1
    }

    /// Room left before `max_seq` generated tokens.
    pub fn remaining(&self) -> usize {
        self.model.config.max_seq + 1 - self.len
    }

    pub fn push(&mut self, token: TokenId) -> Result<()> {
        if token as usize >= self.model.config.vocab_size {
            return Err(Error::contract(format!("token id {token} outside vocabulary")));
        }
        if self.len >= self.model.config.max_seq {
            return Err(Error::contract("decoder is at max_seq"));
        }
        self.advance(token)
    }

    /// Next-token logits for a token of `role`.
    pub fn logits(&self, role: Role) -> &[f64] {
        let a = self.map.adapter_for(role);
        let s = self
            .streams
            .iter()
            .find(|s| s.adapter == a)
            .or_else(|| self.streams.first())
            .expect("at least one stream");
        &s.logits
    }

    fn advance(&mut self, token: TokenId) -> Result<()> {
        let pos = self.len;
        for s in &mut self.streams {
            step(self.model, s, token, pos);
        }
        self.len += 1;
        Ok(())
    }
}

fn linear(model: &PolicyModel, x: &[f64], site: Site, adapter: Option<usize>, out_dim: usize) -> Vec<f64> {
    let st = &model.store;
    let w = match site {
        Site::Block(l, p) => model.backbone.blocks[l].weights[Proj::ALL.iter().position(|q| *q == p).unwrap()],
        Site::Head => model.backbone.head,
    };
    let k = x.len();
    let mut y = vec![0.0; out_dim];
    matvec_t(k, out_dim, x, st.get(w).value.data(), &mut y);
    if let Some(i) = adapter {
        let set = &model.adapters[i];
        let f = set.at(site);
        let mut low = vec![0.0; set.rank];
        matvec_t(k, set.rank, x, st.get(f.a).value.data(), &mut low);
        let mut delta = vec![0.0; out_dim];
        matvec_t(set.rank, out_dim, &low, st.get(f.b).value.data(), &mut delta);
        for (yi, di) in y.iter_mut().zip(&delta) {
            *yi += di;
        }
    }
    y
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let r = kernels::rms(x, RMS_EPS);
    x.iter().map(|v| v / r).collect()
}

fn step(model: &PolicyModel, s: &mut Stream, token: TokenId, pos: usize) {
    let c = &model.config;
    let (d, dh) = (c.dim, c.head_dim());
    let st = &model.store;
    let te = st.get(model.backbone.tok_emb).value.row(token as usize);
    let pe = st.get(model.backbone.pos_emb).value.row(pos);
    let mut x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..c.layers {
        let h = rms_norm(&x);
        let q = linear(model, &h, Site::Block(l, Proj::Q), s.adapter, d);
        let k = linear(model, &h, Site::Block(l, Proj::K), s.adapter, d);
        let v = linear(model, &h, Site::Block(l, Proj::V), s.adapter, d);
        s.keys[l].extend_from_slice(&k);
        s.values[l].extend_from_slice(&v);
        let n = pos + 1;
        let mut o = vec![0.0; d];
        for hd in 0..c.heads {
            let qh = &q[hd * dh..(hd + 1) * dh];
            let mut scores: Vec<f64> = (0..n)
                .map(|j| kernels::dot(qh, &s.keys[l][j * d + hd * dh..j * d + (hd + 1) * dh]) * scale)
                .collect();
            kernels::softmax_in_place(&mut scores);
            let oh = &mut o[hd * dh..(hd + 1) * dh];
            for (j, p) in scores.iter().enumerate() {
                kernels::axpy(*p, &s.values[l][j * d + hd * dh..j * d + (hd + 1) * dh], oh);
            }
        }
        let o = linear(model, &o, Site::Block(l, Proj::O), s.adapter, d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let h = rms_norm(&x);
        let mut u = linear(model, &h, Site::Block(l, Proj::Up), s.adapter, c.mlp_hidden);
        u.iter_mut().for_each(|v| *v *= kernels::sigmoid(*v));
        let dn = linear(model, &u, Site::Block(l, Proj::Down), s.adapter, d);
        x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
    }
    let h = rms_norm(&x);
    s.logits = linear(model, &h, Site::Head, s.adapter, c.vocab_size);
}
