use dartlab::leas::{closed_form, estimate_correctness, logit, solve, solve_effects, CorrectnessRecord};
use dartlab::router::{Role, TokenId};
use dartlab::toolenv::{one_hot_logits, Corpus, CorpusSpec, EpisodeConfig, ScriptedAgent, Split};
use dartlab::variants::{design_matrix, VariantKind};
use proptest::prelude::*;

fn apply(x: &[[f64; 6]; 6], lambda: &[f64; 6]) -> [f64; 6] {
    x.map(|row| row.iter().zip(lambda).map(|(a, b)| a * b).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn effects_round_trip(lambda in prop::array::uniform6(-8.0f64..8.0)) {
        let x = design_matrix();
        let z = apply(&x, &lambda);
        let (back, residual) = solve(&x, z).unwrap();
        for k in 0..6 {
            prop_assert!((back[k] - lambda[k]).abs() < 1e-9);
        }
        prop_assert!(residual < 1e-9);
        // z_uni - z_mtool - z_mreas + z_base
        let contrast = z[5] - z[3] - z[4] + z[0];
        prop_assert!((back[5] - contrast).abs() < 1e-9);
        let cf = closed_form(z);
        for k in 0..6 {
            prop_assert!((cf[k] - back[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn logit_is_monotone(n in 1usize..200, a in 0usize..200, b in 0usize..200) {
        let (a, b) = (a.min(n), b.min(n));
        let (sa, sb) = (a as f64 / n as f64, b as f64 / n as f64);
        if a < b {
            prop_assert!(logit(sa, n) < logit(sb, n));
        }
        prop_assert!(logit(sa, n).is_finite());
        prop_assert!((logit(sa, n) + logit(1.0 - sa, n)).abs() < 1e-9);
    }

    #[test]
    fn solved_interaction_from_counts(counts in prop::array::uniform6(0usize..=50)) {
        let records: Vec<CorrectnessRecord> = VariantKind::LEAS
            .iter()
            .zip(counts)
            .map(|(k, s)| CorrectnessRecord { question_id: 3, kind: *k, successes: s, samples: 50 })
            .collect();
        let e = solve_effects(&records, &design_matrix()).unwrap();
        let z: Vec<f64> = records.iter().map(|r| r.z()).collect();
        prop_assert!((e.interaction() - (z[5] - z[3] - z[4] + z[0])).abs() < 1e-9);
    }
}

#[test]
fn logit_of_the_edges_is_clamped() {
    assert!((logit(1.0, 50) - (99.0f64).ln()).abs() < 1e-12);
    assert!((logit(0.0, 50) + (99.0f64).ln()).abs() < 1e-12);
    assert_eq!(logit(0.5, 10), 0.0);
}

#[test]
fn missing_or_duplicate_kinds_are_rejected() {
    let rec = |k| CorrectnessRecord {
        question_id: 1,
        kind: k,
        successes: 1,
        samples: 2,
    };
    let mut records: Vec<_> = VariantKind::LEAS.iter().map(|k| rec(*k)).collect();
    records[5] = rec(VariantKind::Base);
    assert!(solve_effects(&records, &design_matrix()).is_err());
    assert!(solve_effects(&records[..5], &design_matrix()).is_err());
}

#[test]
fn correctness_counts_exact_matches() {
    let c = Corpus::generate(&CorpusSpec::default()).unwrap();
    let g = c.vocab.grammar;
    let v = c.vocab.size();
    let q = c.split(Split::Test).next().unwrap();
    let prompt_len = q.surface.len();
    let gold = q.gold_answer.clone();
    let right: Vec<TokenId> = [vec![g.answer_open], gold, vec![g.answer_close]].concat();
    let oracle = ScriptedAgent {
        vocab_size: v,
        max_seq: 64,
        script: move |p: &[TokenId], _: Role| one_hot_logits(v, right[p.len() - prompt_len]),
    };
    let cfg = EpisodeConfig::default();
    let r = estimate_correctness(&oracle, VariantKind::Base, &c, q, 7, &cfg, 0).unwrap();
    assert_eq!((r.successes, r.samples), (7, 7));
    assert_eq!(r.s_hat(), 1.0);
    let silent = ScriptedAgent {
        vocab_size: v,
        max_seq: 64,
        script: move |_: &[TokenId], _: Role| one_hot_logits(v, g.think_open),
    };
    let r = estimate_correctness(&silent, VariantKind::Base, &c, q, 3, &cfg, 0).unwrap();
    assert_eq!(r.successes, 0);
    assert!(estimate_correctness(&silent, VariantKind::Base, &c, q, 0, &cfg, 0).is_err());
}

#[test]
fn uniform_guessing_over_four_candidates_scores_a_quarter() {
    let c = Corpus::generate(&CorpusSpec::default()).unwrap();
    let g = c.vocab.grammar;
    let v = c.vocab.size();
    let q = c.split(Split::Test).find(|q| q.hops == 1).unwrap();
    let prompt_len = q.surface.len();
    let gold = q.gold_answer[0];
    let mut candidates = vec![gold];
    candidates.extend(c.vocab.values().filter(|t| *t != gold).take(3));
    let guesser = ScriptedAgent {
        vocab_size: v,
        max_seq: 64,
        script: move |p: &[TokenId], _: Role| match p.len() - prompt_len {
            0 => one_hot_logits(v, g.answer_open),
            1 => {
                let mut l = vec![-1e9; v];
                for t in &candidates {
                    l[*t as usize] = 0.0;
                }
                l
            }
            _ => one_hot_logits(v, g.answer_close),
        },
    };
    let n = 4000;
    let r = estimate_correctness(&guesser, VariantKind::Base, &c, q, n, &EpisodeConfig::default(), 1).unwrap();
    let half_width = 4.0 * (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((r.s_hat() - 0.25).abs() < half_width, "{}", r.s_hat());
}

#[test]
fn interference_fraction_of_a_known_mixture() {
    use dartlab::leas::{aggregate, Aggregate, EffectCoefficients};
    let effects: Vec<EffectCoefficients> = (0..10)
        .map(|q| EffectCoefficients {
            question_id: q,
            lambda: [0.0, 0.0, 0.0, 0.0, 0.0, if q < 7 { -0.6 } else { 0.4 }],
            residual: 0.0,
        })
        .collect();
    let records: Vec<CorrectnessRecord> = (0..10)
        .flat_map(|q| {
            VariantKind::LEAS.map(|k| CorrectnessRecord {
                question_id: q,
                kind: k,
                successes: 10,
                samples: 50,
            })
        })
        .collect();
    let Aggregate::Report(s) = aggregate(&effects, &records, 0.25).unwrap() else {
        panic!("nothing aggregated")
    };
    assert_eq!(s.interference_fraction, 0.7);
    assert_eq!(s.bins.iter().map(|b| b.count).sum::<usize>(), 10);
}
