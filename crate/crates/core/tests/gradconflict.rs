mod common;

use common::{corpus, randomize_adapters, tiny_model, trajectories};
use dartlab::gradconflict::{
    angle, conflict_report_from, constructed_conflict, cosine, role_gradient, GradientSnapshot,
};
use dartlab::policy::AdapterLayout;
use dartlab::router::{label_tokens, MaskVariant, Role};
use dartlab::toolenv::{EndReason, EpisodeRecord};
use dartlab::trainer::{accumulate_pg_grad, Scored, Target};
use dartlab::Error;
use proptest::prelude::*;

fn snap(flat: Vec<f64>) -> GradientSnapshot {
    GradientSnapshot {
        role: Role::Tool,
        trajectory: 0,
        flat,
        manifest_hash: "same".into(),
        empty: false,
    }
}

fn single_model(seed: u64) -> dartlab::policy::PolicyModel {
    let c = corpus();
    let mut m = tiny_model(&c, AdapterLayout::Single { rank: 4 }, seed);
    randomize_adapters(&mut m, seed + 1);
    m
}

#[test]
fn role_snapshots_add_up_to_the_unified_gradient() {
    let c = corpus();
    let model = single_model(1);
    for (i, d) in trajectories(&c, 10, 2).iter().enumerate() {
        let r = role_gradient(&model, i, &d.tokens, d.prompt_len, Role::Reasoning, 1.0, None).unwrap();
        let a = role_gradient(&model, i, &d.tokens, d.prompt_len, Role::Tool, 1.0, None).unwrap();
        let mut m = model.clone();
        m.store_mut().zero_grad();
        let item = Scored {
            tokens: &d.tokens,
            prompt_len: d.prompt_len,
            advantage: 1.0,
        };
        accumulate_pg_grad(&mut m, None, &[item], 1, Target::Masked(MaskVariant::Unified), 0.0).unwrap();
        let u = m.store().flat_grad(&m.trainable_ids());
        for (k, g) in u.iter().enumerate() {
            assert!((g - (r.flat[k] + a.flat[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn snapshots_do_not_touch_the_model() {
    let c = corpus();
    let model = single_model(3);
    let before = model.to_bytes().unwrap();
    let d = &trajectories(&c, 1, 4)[0];
    role_gradient(&model, 0, &d.tokens, d.prompt_len, Role::Tool, 1.0, None).unwrap();
    assert_eq!(model.to_bytes().unwrap(), before);
    assert_eq!(model.store().grad_norm(&model.trainable_ids()), 0.0);
}

#[test]
fn identical_trajectories_have_angle_zero() {
    let c = corpus();
    let model = single_model(5);
    let d = &trajectories(&c, 1, 6)[0];
    let g1 = role_gradient(&model, 0, &d.tokens, d.prompt_len, Role::Reasoning, 1.0, None).unwrap();
    let g2 = role_gradient(&model, 1, &d.tokens, d.prompt_len, Role::Reasoning, 1.0, None).unwrap();
    assert_eq!(g1.flat, g2.flat);
    assert!(angle(&g1, &g2).unwrap() < 1e-6);
}

#[test]
fn a_role_without_tokens_has_no_angle() {
    let c = corpus();
    let model = single_model(7);
    let g = c.vocab.grammar;
    // Answer straight away: no tool tokens at all.
    let q = &c.questions[0];
    let tokens: Vec<_> = q
        .surface
        .iter()
        .copied()
        .chain([g.answer_open])
        .chain(q.gold_answer.iter().copied())
        .chain([g.answer_close])
        .collect();
    assert!(!label_tokens(&tokens, &g).contains(&Role::Tool));
    let prompt_len = q.surface.len();
    let r = role_gradient(&model, 0, &tokens, prompt_len, Role::Reasoning, 1.0, None).unwrap();
    let a = role_gradient(&model, 0, &tokens, prompt_len, Role::Tool, 1.0, None).unwrap();
    assert!(a.empty && a.is_zero() && !r.empty);
    assert!(matches!(cosine(&r, &a), Err(Error::UndefinedAngle(_))));
    assert!(role_gradient(&model, 0, &tokens, prompt_len, Role::Env, 1.0, None).is_err());
}

#[test]
fn report_counts_pairs_and_skips() {
    let c = corpus();
    let model = single_model(8);
    let records: Vec<EpisodeRecord> = trajectories(&c, 5, 9)
        .into_iter()
        .map(|d| EpisodeRecord {
            question_id: 0,
            prompt_len: d.prompt_len,
            roles: label_tokens(&d.tokens, &c.vocab.grammar),
            tokens: d.tokens,
            tool_calls: vec![],
            answer: None,
            gold_answer: vec![],
            reward: 0.0,
            end: EndReason::Answered,
        })
        .collect();
    let report = conflict_report_from(&model, &records).unwrap();
    // 5 cross-role pairs, 10 same-role pairs per role.
    assert_eq!(report.pairs.len() + report.skipped, 25);
    for p in &report.pairs {
        assert!((0.0..=std::f64::consts::PI).contains(&p.angle_rad));
        assert!((p.cosine.acos() - p.angle_rad).abs() < 1e-12);
    }
    assert!(conflict_report_from(&model, &records[..1]).is_err());
}

#[test]
fn constructed_case_is_a_conflict() {
    for v in [2, 3, 10, 72] {
        let cc = constructed_conflict(v, 0, v - 1).unwrap();
        assert!(cc.cosine < 0.0);
        assert!((cc.cosine - cc.expected_cosine).abs() < 1e-12, "V = {v}");
        assert!(cc.angle > std::f64::consts::FRAC_PI_2);
    }
    assert!(constructed_conflict(5, 2, 2).is_err());
}

#[test]
fn different_parameter_sets_are_not_compared() {
    let a = snap(vec![1.0, 2.0]);
    let mut b = snap(vec![1.0, 2.0]);
    b.manifest_hash = "other".into();
    assert!(cosine(&a, &b).is_err());
    assert!(cosine(&a, &snap(vec![1.0])).is_err());
}

fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 8).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn angle_is_symmetric_and_scale_free(a in nonzero_vec(), b in nonzero_vec(), s in 0.01f64..100.0) {
        let (ga, gb) = (snap(a.clone()), snap(b));
        let t = angle(&ga, &gb).unwrap();
        prop_assert!((t - angle(&gb, &ga).unwrap()).abs() < 1e-12);
        let scaled = snap(a.iter().map(|x| x * s).collect());
        prop_assert!((t - angle(&scaled, &gb).unwrap()).abs() < 1e-6);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&t));
        let neg = snap(a.iter().map(|x| -x).collect());
        prop_assert!((angle(&neg, &ga).unwrap() - std::f64::consts::PI).abs() < 1e-6);
    }
}

#[test]
fn snapshots_match_directional_finite_differences() {
    let c = corpus();
    let model = single_model(10);
    let demos = trajectories(&c, 10, 11);
    let d = demos
        .iter()
        .find(|d| label_tokens(&d.tokens, &c.vocab.grammar).contains(&Role::Tool))
        .unwrap();
    let snap = role_gradient(&model, 0, &d.tokens, d.prompt_len, Role::Tool, 1.0, None).unwrap();
    let ids = model.trainable_ids();
    let grammar = *model.grammar();
    let objective = |m: &dartlab::policy::PolicyModel| -> f64 {
        let mask = dartlab::trainer::token_mask(&d.tokens, d.prompt_len, &grammar, Target::Masked(MaskVariant::Tool));
        let roles = dartlab::router::generation_roles(&d.tokens, &grammar);
        let lp = m
            .token_log_probs(
                &d.tokens,
                dartlab::policy::Routing::PerToken(&roles, m.default_role_map()),
            )
            .unwrap();
        -lp.iter().zip(&mask).filter(|(_, k)| **k).map(|(l, _)| l).sum::<f64>()
    };
    // Direction: the normalized gradient plus a fixed tilt.
    let n = snap.norm();
    let dir: Vec<f64> = snap
        .flat
        .iter()
        .enumerate()
        .map(|(i, g)| g / n + if i % 3 == 0 { 0.1 } else { -0.05 })
        .collect();
    let h = 1e-5;
    let shifted = |sign: f64| {
        let mut m = model.clone();
        let mut k = 0;
        for id in &ids {
            for v in m.store_mut().get_mut(*id).value.data_mut() {
                *v += sign * h * dir[k];
                k += 1;
            }
        }
        objective(&m)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
    let analytic: f64 = snap.flat.iter().zip(&dir).map(|(g, u)| g * u).sum();
    assert!(
        (numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1.0),
        "{numeric} vs {analytic}"
    );
}

#[test]
fn a_frozen_zero_tool_adapter_skips_cross_role_pairs() {
    let c = corpus();
    let mut model = tiny_model(&c, common::DUAL, 12);
    let tool = model.adapter(dartlab::policy::AdapterSlot::Tool).unwrap().param_ids();
    for id in tool {
        model.store_mut().set_requires_grad(id, false);
    }
    let records: Vec<EpisodeRecord> = trajectories(&c, 4, 13)
        .into_iter()
        .filter(|d| label_tokens(&d.tokens, &c.vocab.grammar).contains(&Role::Tool))
        .map(|d| EpisodeRecord {
            question_id: 0,
            prompt_len: d.prompt_len,
            roles: label_tokens(&d.tokens, &c.vocab.grammar),
            tokens: d.tokens,
            tool_calls: vec![],
            answer: None,
            gold_answer: vec![],
            reward: 0.0,
            end: EndReason::Answered,
        })
        .collect();
    assert!(records.len() >= 2);
    let report = conflict_report_from(&model, &records).unwrap();
    assert!(report.mean_cross_role.is_none() && report.mean_same_role_a.is_none());
    assert!(report
        .pairs
        .iter()
        .all(|p| p.pair_type == dartlab::gradconflict::PairType::SameRoleR));
}
