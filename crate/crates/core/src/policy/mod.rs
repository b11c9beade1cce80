//! Tiny autoregressive transformer policy with a freezable backbone and
//! low-rank adapters on every linear layer.
//!
//! Three forward modes are supported through [`Routing`]: backbone only, a
//! single adapter for all tokens, and per-token routing between disjoint
//! reasoning and tool adapters. A routed prediction is computed entirely
//! under the adapter of its role, so a loss on one role's tokens can only
//! reach that role's adapter.

mod checkpoint;
mod config;
mod decode;
mod model;
mod sample;

pub use config::{AdapterLayout, AdapterSlot, PolicyConfig};
pub use decode::Decoder;
pub use model::{AdapterSet, LoraFactors, PolicyModel, Proj, RoleMap, RoutedLogProbs, Routing, Site};
pub use sample::{argmax, sample_step, sampling_distribution, Decoding};
