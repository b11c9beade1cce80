#![allow(dead_code)]

use dartlab::autodiff::{ParamId, Tensor};
use dartlab::policy::{AdapterLayout, PolicyConfig, PolicyModel};
use dartlab::toolenv::{demonstration, Corpus, CorpusSpec, Demo, DemoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus() -> Corpus {
    Corpus::generate(&CorpusSpec::default()).unwrap()
}

pub fn tiny_config(adapters: AdapterLayout) -> PolicyConfig {
    PolicyConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        mlp_hidden: 12,
        max_seq: 64,
        adapters,
        ..Default::default()
    }
}

pub const DUAL: AdapterLayout = AdapterLayout::Dual {
    reasoning_rank: 2,
    tool_rank: 2,
};

pub fn tiny_model(corpus: &Corpus, adapters: AdapterLayout, seed: u64) -> PolicyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyModel::new(tiny_config(adapters), corpus.vocab.grammar, &mut rng).unwrap()
}

/// Fills every `B` factor with noise so adapters change the forward pass.
pub fn randomize_adapters(model: &mut PolicyModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        if model.store().get(id).name.ends_with(".B") {
            let shape = model.store().get(id).value.shape().to_vec();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            model.store_mut().get_mut(id).value = Tensor::new(shape, data).unwrap();
        }
    }
}

/// Noisy demonstrations: well-formed trajectories with every span kind.
pub fn trajectories(corpus: &Corpus, n: usize, seed: u64) -> Vec<Demo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DemoConfig::default();
    (0..n)
        .map(|_| demonstration(&corpus.vocab, &cfg, &mut rng).unwrap())
        .collect()
}
