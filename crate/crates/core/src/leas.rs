//! Linear effect attribution.
//!
//! For each question, the logit of every variant's empirical correctness is
//! modeled as `z = X λ` where `X` holds the variants' capability vectors.
//! Six variants, six unknowns: the system is exactly determined, so `λ` is
//! recovered by a dense solve. `λ23 < 0` means training reasoning and tool
//! use in shared parameters hurt the question (interference), `λ23 > 0`
//! that it helped (synergy).

use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toolenv::{evaluate, Agent, Corpus, EpisodeConfig, Question};
use crate::variants::{design_matrix, VariantKind, VariantSet};

/// Stochastic samples per (variant, question).
pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_BIN_WIDTH: f64 = 0.25;
/// Largest `|X λ - z|` accepted from a solve.
pub const RESIDUAL_TOL: f64 = 1e-9;

pub const COEFFICIENTS_FILE: &str = "leas_coefficients.csv";
pub const HISTOGRAM_FILE: &str = "leas_histogram.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessRecord {
    pub question_id: u32,
    pub kind: VariantKind,
    /// Exact-match successes out of `samples`.
    pub successes: usize,
    pub samples: usize,
}

impl CorrectnessRecord {
    pub fn s_hat(&self) -> f64 {
        self.successes as f64 / self.samples as f64
    }

    pub fn z(&self) -> f64 {
        logit(self.s_hat(), self.samples)
    }
}

/// Runs `samples` sampled episodes of `agent` on `question`.
pub fn estimate_correctness(
    agent: &dyn Agent,
    kind: VariantKind,
    corpus: &Corpus,
    question: &Question,
    samples: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<CorrectnessRecord> {
    if samples == 0 {
        return Err(Error::contract("correctness needs at least one sample"));
    }
    let recs = evaluate(agent, corpus, &[question], cfg, samples, seed)?;
    Ok(CorrectnessRecord {
        question_id: question.id,
        kind,
        successes: recs.iter().filter(|r| r.reward == 1.0).count(),
        samples,
    })
}

/// `log(s / (1 - s))` with `s` clamped to `[1/(2n), 1 - 1/(2n)]`.
pub fn logit(s: f64, n: usize) -> f64 {
    let eps = 1.0 / (2.0 * n.max(1) as f64);
    let s = s.clamp(eps, 1.0 - eps);
    (s / (1.0 - s)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectCoefficients {
    pub question_id: u32,
    /// `(λ1, λ2, λ3, λ12, λ13, λ23)`.
    pub lambda: [f64; 6],
    pub residual: f64,
}

impl EffectCoefficients {
    pub fn interaction(&self) -> f64 {
        self.lambda[5]
    }
}

fn to_matrix(design: &[[f64; 6]; 6]) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| design[i][j])
}

pub fn determinant(design: &[[f64; 6]; 6]) -> f64 {
    to_matrix(design).determinant()
}

/// Solves `X λ = z`, returning `λ` and the max-norm residual.
pub fn solve(design: &[[f64; 6]; 6], z: [f64; 6]) -> Result<([f64; 6], f64)> {
    let x = to_matrix(design);
    let zv = Vector6::from(z);
    let lambda = x
        .lu()
        .solve(&zv)
        .ok_or_else(|| Error::contract("design matrix is singular"))?;
    let residual = (x * lambda - zv).amax();
    Ok((lambda.into(), residual))
}

/// The six logits of one question's records, in [`VariantKind::LEAS`] order.
fn logits_by_kind(records: &[CorrectnessRecord]) -> Result<(u32, [f64; 6])> {
    let qid = records
        .first()
        .ok_or_else(|| Error::contract("no correctness records"))?
        .question_id;
    if records.len() != 6 || records.iter().any(|r| r.question_id != qid) {
        return Err(Error::contract("effects need exactly six records for one question"));
    }
    let mut z = [0.0; 6];
    for (row, kind) in VariantKind::LEAS.iter().enumerate() {
        let mut hits = records.iter().filter(|r| r.kind == *kind);
        match (hits.next(), hits.next()) {
            (Some(r), None) => z[row] = r.z(),
            _ => {
                return Err(Error::contract(format!(
                    "need exactly one {kind} record for question {qid}"
                )))
            }
        }
    }
    Ok((qid, z))
}

/// `design` rows follow [`VariantKind::LEAS`].
pub fn solve_effects(records: &[CorrectnessRecord], design: &[[f64; 6]; 6]) -> Result<EffectCoefficients> {
    let (question_id, z) = logits_by_kind(records)?;
    let (lambda, residual) = solve(design, z)?;
    Ok(EffectCoefficients {
        question_id,
        lambda,
        residual,
    })
}

/// The solution for the canonical design, by back substitution.
pub fn closed_form(z: [f64; 6]) -> [f64; 6] {
    let [base, h_tool, h_reas, m_tool, m_reas, m_uni] = z;
    [
        base,
        h_tool - base,
        h_reas - base,
        m_tool - h_tool,
        m_reas - h_reas,
        m_uni - m_tool - m_reas + base,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// Mean over the bin's questions of the six-variant mean correctness.
    /// NaN for an empty bin.
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub questions: usize,
    pub bins: Vec<Bin>,
    pub interference_fraction: f64,
    pub synergy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Aggregate {
    /// No question survived the filter.
    Empty,
    Report(Summary),
}

/// Keeps questions some variant answered at least once, then histograms
/// `λ23` in bins of `bin_width` aligned to zero.
pub fn aggregate(effects: &[EffectCoefficients], records: &[CorrectnessRecord], bin_width: f64) -> Result<Aggregate> {
    if bin_width.is_nan() || bin_width <= 0.0 || bin_width.is_infinite() {
        return Err(Error::contract("bin width must be positive"));
    }
    let mut kept = Vec::new();
    for e in effects {
        let rs: Vec<_> = records.iter().filter(|r| r.question_id == e.question_id).collect();
        if rs.iter().any(|r| r.successes > 0) {
            let acc = rs.iter().map(|r| r.s_hat()).sum::<f64>() / rs.len() as f64;
            kept.push((e.interaction(), acc));
        }
    }
    if kept.is_empty() {
        return Ok(Aggregate::Empty);
    }
    let index = |l: f64| (l / bin_width).floor() as i64;
    let lo = kept.iter().map(|(l, _)| index(*l)).min().unwrap_or(0);
    let hi = kept.iter().map(|(l, _)| index(*l)).max().unwrap_or(0);
    let bins = (lo..=hi)
        .map(|i| {
            let members: Vec<f64> = kept.iter().filter(|(l, _)| index(*l) == i).map(|(_, a)| *a).collect();
            Bin {
                bin_lo: i as f64 * bin_width,
                bin_hi: (i + 1) as f64 * bin_width,
                count: members.len(),
                mean_accuracy: members.iter().sum::<f64>() / members.len() as f64,
            }
        })
        .collect();
    let n = kept.len() as f64;
    Ok(Aggregate::Report(Summary {
        questions: kept.len(),
        bins,
        interference_fraction: kept.iter().filter(|(l, _)| *l < 0.0).count() as f64 / n,
        synergy_fraction: kept.iter().filter(|(l, _)| *l > 0.0).count() as f64 / n,
    }))
}

/// Correctness of all six variants on every question, then one solve per
/// question. Every variant sees the same episode seeds.
pub fn run(
    variants: &VariantSet,
    corpus: &Corpus,
    questions: &[&Question],
    samples: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(Vec<CorrectnessRecord>, Vec<EffectCoefficients>)> {
    let agents = VariantKind::LEAS
        .iter()
        .map(|k| Ok((*k, variants.agent(*k)?)))
        .collect::<Result<Vec<_>>>()?;
    let design = design_matrix();
    let mut records = Vec::new();
    let mut effects = Vec::new();
    for q in questions {
        let start = records.len();
        for (kind, agent) in &agents {
            records.push(estimate_correctness(
                agent.as_ref(),
                *kind,
                corpus,
                q,
                samples,
                cfg,
                seed,
            )?);
        }
        effects.push(solve_effects(&records[start..], &design)?);
    }
    Ok((records, effects))
}

#[derive(Serialize)]
struct CoefficientRow {
    question_id: u32,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    lambda12: f64,
    lambda13: f64,
    lambda23: f64,
    residual: f64,
}

pub fn write_coefficients(effects: &[EffectCoefficients], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for e in effects {
        let [lambda1, lambda2, lambda3, lambda12, lambda13, lambda23] = e.lambda;
        w.serialize(CoefficientRow {
            question_id: e.question_id,
            lambda1,
            lambda2,
            lambda3,
            lambda12,
            lambda13,
            lambda23,
            residual: e.residual,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// An empty aggregate writes the header only.
pub fn write_histogram(agg: &Aggregate, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    match agg {
        Aggregate::Empty => w
            .write_record(["bin_lo", "bin_hi", "count", "mean_accuracy"])
            .map_err(csv_error)?,
        Aggregate::Report(s) => {
            for b in &s.bins {
                w.serialize(b).map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(qid: u32, kind: VariantKind, successes: usize) -> CorrectnessRecord {
        CorrectnessRecord {
            question_id: qid,
            kind,
            successes,
            samples: 50,
        }
    }

    #[test]
    fn logit_examples() {
        assert_eq!(logit(0.5, 50), 0.0);
        assert!((logit(1.0, 50) - 99f64.ln()).abs() < 1e-12);
        assert!((logit(1.0, 50) - 4.5951).abs() < 1e-4);
        assert!((logit(0.25, 50) - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(logit(0.0, 50).is_finite());
    }

    #[test]
    fn design_is_invertible() {
        let d = determinant(&design_matrix());
        assert!(d.abs() > 0.5, "{d}");
    }

    #[test]
    fn known_lambda_round_trips() {
        let lambda = [0.5, 0.2, 0.1, 0.0, 0.0, -0.3];
        let x = design_matrix();
        let z: [f64; 6] = std::array::from_fn(|i| (0..6).map(|j| x[i][j] * lambda[j]).sum());
        let (got, residual) = solve(&x, z).unwrap();
        for j in 0..6 {
            assert!((got[j] - lambda[j]).abs() < 1e-9);
        }
        assert!(residual <= RESIDUAL_TOL);
    }

    #[test]
    fn constant_logits_are_all_base() {
        let (got, _) = solve(&design_matrix(), [0.7; 6]).unwrap();
        assert!((got[0] - 0.7).abs() < 1e-12);
        assert!(got[1..].iter().all(|l| l.abs() < 1e-12));
    }

    #[test]
    fn records_in_any_order() {
        let mut rs: Vec<_> = VariantKind::LEAS
            .iter()
            .enumerate()
            .map(|(i, k)| rec(3, *k, 5 * i))
            .collect();
        let a = solve_effects(&rs, &design_matrix()).unwrap();
        rs.reverse();
        let b = solve_effects(&rs, &design_matrix()).unwrap();
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.question_id, 3);
        rs.pop();
        assert!(solve_effects(&rs, &design_matrix()).is_err());
    }

    #[test]
    fn filter_and_histogram() {
        let effects: Vec<_> = (0..4)
            .map(|q| EffectCoefficients {
                question_id: q,
                lambda: [0.0, 0.0, 0.0, 0.0, 0.0, -1.0],
                residual: 0.0,
            })
            .collect();
        let mut records = vec![];
        for q in 0..4 {
            for k in VariantKind::LEAS {
                records.push(rec(q, k, if q == 0 { 0 } else { 25 }));
            }
        }
        let Aggregate::Report(s) = aggregate(&effects, &records, 0.25).unwrap() else {
            panic!("empty")
        };
        assert_eq!(s.questions, 3);
        assert_eq!(s.bins.len(), 1);
        assert_eq!(s.bins[0].count, 3);
        assert_eq!(s.bins[0].bin_lo, -1.0);
        assert!((s.bins[0].mean_accuracy - 0.5).abs() < 1e-12);
        assert_eq!(s.interference_fraction, 1.0);
        assert_eq!(aggregate(&effects[..1], &records, 0.25).unwrap(), Aggregate::Empty);
        assert!(aggregate(&effects, &records, 0.0).is_err());
    }
}
