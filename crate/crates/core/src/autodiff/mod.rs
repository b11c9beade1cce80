//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is built fresh for each forward pass. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::param`] snapshots a parameter
//! into the tape and [`Tape::backward`] accumulates gradients back into the
//! store. Nodes whose inputs never require grad are skipped entirely in the
//! reverse sweep, so frozen parameters keep bitwise-zero gradients.

pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ManifestEntry, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
