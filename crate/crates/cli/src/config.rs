use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dartlab::policy::{AdapterLayout, PolicyConfig};
use dartlab::toolenv::{CorpusSpec, EpisodeConfig, Vocabulary};
use dartlab::trainer::{PretrainConfig, TrainConfig};
use dartlab::variants::VariantKind;
use serde::{Deserialize, Serialize};

/// Everything a run needs. The top-level `seed` replaces the seeds inside
/// `pretrain` and `train`; the corpus keeps its own so that several
/// training seeds can share one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSpec,
    /// Backbone shape. Its `adapters` entry is ignored; see `ranks`.
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub ranks: Ranks,
    /// Variants trained by `variants`.
    pub variants: Vec<VariantKind>,
    pub eval: EvalConfig,
    pub leas: LeasConfig,
    pub gradangle: GradAngleConfig,
    pub efficiency: EfficiencyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ranks {
    /// Rank of the shared adapter of the masked variants.
    pub single: usize,
    pub reasoning: usize,
    pub tool: usize,
}

impl Default for Ranks {
    fn default() -> Self {
        Ranks {
            single: 16,
            reasoning: 8,
            tool: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sampled episodes per question.
    pub samples: usize,
    pub episode: EpisodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 16,
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeasConfig {
    pub samples: usize,
    pub bin_width: f64,
}

impl Default for LeasConfig {
    fn default() -> Self {
        LeasConfig {
            samples: dartlab::leas::DEFAULT_SAMPLES,
            bin_width: dartlab::leas::DEFAULT_BIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradAngleConfig {
    pub rollouts: usize,
    /// Restrict the sampled questions to one hop count.
    pub hops: Option<u8>,
}

impl Default for GradAngleConfig {
    fn default() -> Self {
        GradAngleConfig {
            rollouts: dartlab::gradconflict::DEFAULT_ROLLOUTS,
            hops: Some(2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencyConfig {
    /// Backbone size to cost; the configured policy when absent.
    pub backbone_params: Option<f64>,
    pub adapter_params: Option<f64>,
    /// Context length at each role handoff; taken from a reference
    /// two-hop trajectory when absent.
    pub turn_lengths: Option<Vec<u64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            corpus: CorpusSpec::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            ranks: Ranks::default(),
            variants: vec![
                VariantKind::MReas,
                VariantKind::MTool,
                VariantKind::MUnified,
                VariantKind::Dart,
            ],
            eval: EvalConfig::default(),
            leas: LeasConfig::default(),
            gradangle: GradAngleConfig::default(),
            efficiency: EfficiencyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}: {e}", origin.display()))?;
        cfg.validate().with_context(|| format!("{}", origin.display()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.corpus.n_keys, self.corpus.n_values)
    }

    /// Seeds pushed down into the nested configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = self.seed;
        c.train.seed = self.seed;
        c.pretrain.demo.n_bridge = self.corpus.n_bridge;
        c.pretrain.demo.top_k = self.train.top_k;
        c
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let vocab = self.vocabulary();
        vocab.validate()?;
        if self.policy.vocab_size != vocab.size() {
            bail!(
                "policy.vocab_size is {} but the corpus (corpus.n_keys = {}, corpus.n_values = {}) needs {}",
                self.policy.vocab_size,
                self.corpus.n_keys,
                self.corpus.n_values,
                vocab.size()
            );
        }
        self.policy.with_adapters(AdapterLayout::None).validate()?;
        for (name, rank) in [
            ("single", self.ranks.single),
            ("reasoning", self.ranks.reasoning),
            ("tool", self.ranks.tool),
        ] {
            if rank == 0 || rank >= self.policy.dim {
                bail!(
                    "ranks.{name} is {rank}; it must be in 1..{} (below policy.dim)",
                    self.policy.dim
                );
            }
        }
        self.pretrain.demo.validate()?;
        self.train.validate()?;
        self.eval.episode.validate()?;
        if self.eval.samples == 0 {
            bail!("eval.samples must be >= 1");
        }
        if self.leas.samples == 0 {
            bail!("leas.samples must be >= 1");
        }
        if self.leas.bin_width.is_nan() || self.leas.bin_width <= 0.0 {
            bail!("leas.bin_width must be positive");
        }
        if self.gradangle.rollouts < 2 {
            bail!("gradangle.rollouts must be >= 2");
        }
        if matches!(self.gradangle.hops, Some(h) if h != 1 && h != 2) {
            bail!("gradangle.hops must be 1 or 2");
        }
        for k in &self.variants {
            if k.is_hybrid() || *k == VariantKind::Base {
                bail!("variants lists trained kinds only; `{k}` is built from them");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_line_and_field() {
        let err = ExperimentConfig::from_toml("seed = 1\n[train]\nstepz = 3\n", Path::new("bad.toml")).unwrap_err();
        let msg = format!("{err:#}");
        assert!(
            msg.contains("bad.toml") && msg.contains("line 3") && msg.contains("stepz"),
            "{msg}"
        );
        let err = ExperimentConfig::from_toml("[policy]\nvocab_size = 10\n", Path::new("v.toml")).unwrap_err();
        assert!(format!("{err:#}").contains("policy.vocab_size"));
    }
}
