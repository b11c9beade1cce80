use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable (or frozen) tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

/// One manifest line: parameter name and shape, in registration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered parameter registry. Registration order is declaration order and
/// defines the flattening used for gradient snapshots and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            requires_grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn zero_grad_of(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect()
    }

    /// SHA-256 over the ordered names and shapes of `ids`.
    pub fn manifest_hash(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update([0xffu8]);
        }
        hex::encode(h.finalize())
    }

    /// Concatenated gradients of `ids` in the given order.
    pub fn flat_grad(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.iter().map(|i| self.params[i.0].grad.len()).sum());
        for id in ids {
            out.extend_from_slice(&self.params[id.0].grad);
        }
        out
    }

    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for id in ids {
            out.extend_from_slice(self.params[id.0].value.data());
        }
        out
    }

    /// Trainable parameters in registration order.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.requires_grad).map(|(i, _)| i).collect()
    }

    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.params[id.0].grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.manifest() != other.manifest() {
            return Err(Error::contract("parameter manifests differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
