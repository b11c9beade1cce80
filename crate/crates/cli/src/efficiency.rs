//! Memory and context-switch cost of two full agents versus one backbone
//! with routed adapters.
//!
//! Memory is counted in parameter-equivalents with four units of trainable
//! state per parameter (weights, gradients, two optimizer moments), so two
//! trainable models cost `8P` and the adapter design `P + 8p`.
//!
//! A byte-level accounting is reported next to it: 16-bit weights and
//! gradients plus two 32-bit optimizer moments, 12 bytes per trainable
//! parameter, 2 per frozen one. The two accountings disagree on the ratio.

use serde::{Deserialize, Serialize};

/// Adapters below this share of the backbone are the typical regime.
pub const TYPICAL_ADAPTER_SHARE: f64 = 0.005;
pub const UNITS_PER_TRAINABLE_PARAM: f64 = 4.0;
pub const BYTES_PER_TRAINABLE_PARAM: f64 = 12.0;
pub const BYTES_PER_FROZEN_PARAM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyInputs {
    /// Backbone parameter count.
    pub backbone: f64,
    /// Adapter parameter count (both adapters).
    pub adapter: f64,
    /// Context length at each handoff between the two roles.
    pub turn_lengths: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Parameter-equivalents.
    pub cost_2agent: f64,
    pub cost_dart: f64,
    pub ratio: f64,
    pub bytes_2agent: f64,
    pub bytes_dart: f64,
    pub bytes_ratio: f64,
    /// Token² units re-encoded across handoffs.
    pub reencode_2agent: u64,
    pub reencode_dart: u64,
    pub typical_regime: bool,
}

pub fn efficiency_model(inputs: &EfficiencyInputs) -> anyhow::Result<EfficiencyReport> {
    let (p_big, p) = (inputs.backbone, inputs.adapter);
    anyhow::ensure!(p_big > 0.0, "backbone parameter count must be positive");
    anyhow::ensure!(p >= 0.0, "adapter parameter count must be non-negative");
    let cost_2agent = 2.0 * UNITS_PER_TRAINABLE_PARAM * p_big;
    let cost_dart = p_big + 2.0 * UNITS_PER_TRAINABLE_PARAM * p;
    let bytes_2agent = 2.0 * BYTES_PER_TRAINABLE_PARAM * p_big;
    let bytes_dart = BYTES_PER_FROZEN_PARAM * p_big + BYTES_PER_TRAINABLE_PARAM * p;
    Ok(EfficiencyReport {
        cost_2agent,
        cost_dart,
        ratio: cost_2agent / cost_dart,
        bytes_2agent,
        bytes_dart,
        bytes_ratio: bytes_2agent / bytes_dart,
        reencode_2agent: inputs.turn_lengths.iter().map(|l| l * l).sum(),
        reencode_dart: 0,
        typical_regime: p <= TYPICAL_ADAPTER_SHARE * p_big,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(backbone: f64, adapter: f64) -> EfficiencyReport {
        efficiency_model(&EfficiencyInputs {
            backbone,
            adapter,
            turn_lengths: vec![10, 20],
        })
        .unwrap()
    }

    #[test]
    fn no_adapter_saves_a_factor_of_eight() {
        let r = report(1e6, 0.0);
        assert_eq!(r.ratio, 8.0);
        assert_eq!(r.bytes_ratio, 12.0);
        assert_eq!(r.reencode_2agent, 500);
        assert_eq!(r.reencode_dart, 0);
    }

    #[test]
    fn billion_parameter_example() {
        let r = report(1e9, 5e6);
        assert!((7.5..=8.0).contains(&r.ratio), "{}", r.ratio);
        assert!(r.typical_regime);
        assert!(!report(1e9, 6e6).typical_regime);
    }

    #[test]
    fn reencoding_sums_squared_turn_lengths() {
        let r = efficiency_model(&EfficiencyInputs {
            backbone: 1.0,
            adapter: 0.0,
            turn_lengths: vec![100, 200],
        })
        .unwrap();
        assert_eq!((r.reencode_2agent, r.reencode_dart), (50000, 0));
    }

    #[test]
    fn bad_sizes_are_rejected() {
        assert!(efficiency_model(&EfficiencyInputs {
            backbone: 0.0,
            adapter: 1.0,
            turn_lengths: vec![],
        })
        .is_err());
    }
}
