//! Analytic gradients against central finite differences.

use dartlab::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use dartlab::policy::{AdapterLayout, PolicyConfig, PolicyModel, Routing};
use dartlab::router::{generation_roles, SegmentGrammar, TokenId};
use dartlab::toolenv::{reference_trajectory, Corpus, CorpusSpec};
use dartlab::trainer::{accumulate_pg_grad, Scored, Target};
use dartlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, FLOOR)`. The floor
/// keeps graphs whose true gradient is zero (a summed softmax) from
/// dividing rounding noise by itself.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(FLOOR)
}

/// Central differences of `loss` over every entry of `ids`.
fn numeric_grad(store: &mut ParamStore, ids: &[ParamId], loss: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for id in ids {
        for i in 0..store.get(*id).value.numel() {
            let orig = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + STEP;
            let up = loss(store);
            store.get_mut(*id).value.data_mut()[i] = orig - STEP;
            let down = loss(store);
            store.get_mut(*id).value.data_mut()[i] = orig;
            out.push((up - down) / (2.0 * STEP));
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Graph = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// A random composition of tape ops over three parameters, reduced to a
/// scalar. Square activations keep every op applicable.
fn random_graph(seed: u64) -> (ParamStore, Vec<ParamId>, Graph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5);
    let mut store = ParamStore::new();
    let x = store.register("x", random_tensor(&mut rng, &[n, n]), true);
    let w = store.register("w", random_tensor(&mut rng, &[n, n]), true);
    let v = store.register("v", random_tensor(&mut rng, &[n, n]), true);
    let ops: Vec<u32> = (0..rng.random_range(2..8)).map(|_| rng.random_range(0..13)).collect();
    let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reduce = rng.random_range(0..3);
    let offset = rng.random_range(0..=n);
    let build = move |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let (xv, wv, vv) = (tape.param(store, x), tape.param(store, w), tape.param(store, v));
        let mut h = xv;
        for op in &ops {
            h = match op {
                0 => tape.matmul(h, wv)?,
                1 => tape.matmul_t(h, wv)?,
                2 => tape.add(h, vv)?,
                3 => tape.mul(h, vv)?,
                4 => tape.scale(h, -0.7),
                5 => {
                    let s = tape.scale(h, 0.3);
                    tape.exp(s)
                }
                6 => tape.silu(h),
                7 => tape.softmax_rows(h),
                8 => tape.log_softmax_rows(h),
                9 => tape.rms_norm_rows(h, 1e-6),
                10 => {
                    let c = tape.concat_cols(&[h, vv])?;
                    tape.slice_cols(c, offset, n)?
                }
                11 => {
                    let m = tape.causal_mask(h)?;
                    tape.softmax_rows(m)
                }
                _ => {
                    let p = tape.softmax_rows(h);
                    tape.log(p)
                }
            };
        }
        Ok(match reduce {
            0 => tape.sum(h),
            1 => tape.mean(h),
            _ => tape.gather_weighted_sum(h, &cols, &weights)?,
        })
    };
    (store, vec![x, w, v], Box::new(build))
}

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..100 {
        let (mut store, ids, build) = random_graph(seed);
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let analytic = store.flat_grad(&ids);
        let f = |s: &ParamStore| {
            let mut t = Tape::new();
            let l = build(&mut t, s).unwrap();
            t.value(l).item()
        };
        let numeric = numeric_grad(&mut store, &ids, &f);
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOLERANCE, "graph {seed}: relative error {err:e}");
    }
}

fn tiny_model(seed: u64) -> (PolicyModel, Corpus) {
    let corpus = Corpus::generate(&CorpusSpec::default()).unwrap();
    let cfg = PolicyConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        mlp_hidden: 12,
        max_seq: 48,
        adapters: AdapterLayout::Dual {
            reasoning_rank: 2,
            tool_rank: 2,
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PolicyModel::new(cfg, corpus.vocab.grammar, &mut rng).unwrap();
    // Zero-initialized factors would make the adapter gradients trivially 0.
    let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        model.store_mut().set_requires_grad(id, true);
        if model.store().get(id).name.ends_with(".B") {
            let shape = model.store().get(id).value.shape().to_vec();
            model.store_mut().get_mut(id).value = random_tensor(&mut rng, &shape);
        }
    }
    (model, corpus)
}

fn pg_loss(model: &PolicyModel, tokens: &[TokenId], prompt_len: usize, target: Target) -> f64 {
    let grammar: SegmentGrammar = *model.grammar();
    let active = dartlab::trainer::token_mask(tokens, prompt_len, &grammar, target);
    let roles = generation_roles(tokens, &grammar);
    let lp = model
        .token_log_probs(tokens, Routing::PerToken(&roles, model.default_role_map()))
        .unwrap();
    // Advantage 0.8, group size 2.
    -0.8 / 2.0 * lp.iter().zip(&active).filter(|(_, a)| **a).map(|(l, _)| l).sum::<f64>()
}

#[test]
fn transformer_policy_loss_matches_finite_differences() {
    let (mut model, corpus) = tiny_model(5);
    let q = corpus.questions.iter().find(|q| q.hops == 2).unwrap();
    let tokens = reference_trajectory(&corpus, q, 3).unwrap();
    for target in [Target::DART, Target::Masked(dartlab::router::MaskVariant::Unified)] {
        model.store_mut().zero_grad();
        let item = Scored {
            tokens: &tokens,
            prompt_len: 2,
            advantage: 0.8,
        };
        accumulate_pg_grad(&mut model, None, &[item], 2, target, 0.0).unwrap();
        let ids = model.trainable_ids();
        let analytic = model.store().flat_grad(&ids);
        let mut probe = model.clone();
        let numeric = numeric_grad(probe.store_mut(), &ids, &|s: &ParamStore| {
            let mut m = model.clone();
            m.store_mut().copy_values_from(s).unwrap();
            pg_loss(&m, &tokens, 2, target)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOLERANCE, "{target}: relative error {err:e}");
    }
}
