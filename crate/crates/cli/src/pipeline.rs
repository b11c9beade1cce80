//! The subcommands as library functions. Each one reads what earlier steps
//! left in the run directory, writes its artifacts and a Markdown summary
//! next to them, and returns the summary path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dartlab::gradconflict::{self, conflict_report};
use dartlab::leas::{self, aggregate, Aggregate};
use dartlab::policy::{AdapterLayout, PolicyModel};
use dartlab::router::Role;
use dartlab::toolenv::{
    evaluate, io, mean_reward, reference_trajectory, replay_eval, retrieval_accuracy, Corpus, EpisodeRecord, Question,
    Split,
};
use dartlab::trainer::{pretrain, write_train_log, QuestionSet};
use dartlab::variants::{single_ability_agent, train_variant, VariantKind, VariantSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::efficiency::{efficiency_model, EfficiencyInputs};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const VARIANTS_DIR: &str = "variants";
pub const EVAL_FILE: &str = "eval.csv";
pub const REPLAY_FILE: &str = "replay_eval.csv";
pub const CORRECTNESS_FILE: &str = "leas_correctness.csv";
pub const EFFICIENCY_FILE: &str = "efficiency.csv";
pub const REPORT_FILE: &str = "report.md";

pub fn train_log_file(kind: VariantKind) -> String {
    format!("train_log_{kind}.csv")
}

pub fn episodes_file(name: &str) -> String {
    format!("episodes_{name}.jsonl")
}

/// A configured run rooted at `cfg.out`.
pub struct Run {
    pub cfg: ExperimentConfig,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_toml()?)?;
        Ok(Run { cfg })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// The corpus of this run, written on first use and read back after.
    pub fn corpus(&self) -> anyhow::Result<Corpus> {
        let path = self.path(CORPUS_FILE);
        if path.exists() {
            let c = io::load_corpus(&path)?;
            let fresh = Corpus::generate(&self.cfg.corpus)?;
            if c != fresh {
                bail!(
                    "{} was generated from a different corpus spec; use a fresh --out directory",
                    path.display()
                );
            }
            return Ok(c);
        }
        let c = Corpus::generate(&self.cfg.corpus)?;
        io::save_corpus(&c, &path)?;
        Ok(c)
    }

    pub fn base(&self) -> anyhow::Result<PolicyModel> {
        let path = self.path(BASE_CHECKPOINT);
        if !path.exists() {
            bail!("{} not found; run `dartlab pretrain` first", path.display());
        }
        Ok(PolicyModel::load(&path)?)
    }

    fn write_summary(&self, name: &str, body: &str) -> anyhow::Result<PathBuf> {
        let path = self.path(&format!("{name}.md"));
        std::fs::write(&path, body)?;
        Ok(path)
    }

    pub fn pretrain(&self) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let policy = self.cfg.policy.with_adapters(AdapterLayout::None);
        let mut model = PolicyModel::new(policy, corpus.vocab.grammar, &mut rng)?;
        let report = pretrain(&mut model, &corpus.vocab, &self.cfg.pretrain)?;
        model.save(&self.path(BASE_CHECKPOINT))?;
        write_csv(&self.path(PRETRAIN_LOG), &report.rows)?;
        let mut md = String::from("# pretrain\n\n");
        writeln!(md, "- steps: {}", report.steps)?;
        writeln!(md, "- held-out next-token accuracy: {:.4}", report.accuracy)?;
        writeln!(
            md,
            "- target {:.2} reached: {}",
            self.cfg.pretrain.target_accuracy, report.reached_target
        )?;
        writeln!(md, "- backbone parameters: {}", model.backbone_count())?;
        self.write_summary("pretrain", &md)
    }

    pub fn train(&self, kind: VariantKind) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let base = self.base()?;
        let r = self.cfg.ranks;
        let (model, report) = train_variant(&base, &corpus, kind, &self.cfg.train, r.single, (r.reasoning, r.tool))?;
        model.save(&self.path(&format!("{kind}.ckpt")))?;
        write_train_log(&report.rows, &self.path(&train_log_file(kind)))?;
        let first = report.rows.first().map_or(0.0, |r| r.mean_reward);
        let last = report.rows.last().map_or(0.0, |r| r.mean_reward);
        let mut md = format!("# train {kind}\n\n");
        writeln!(md, "- steps: {}", report.rows.len())?;
        writeln!(md, "- mean reward, first step: {first:.4}")?;
        writeln!(md, "- mean reward, last step: {last:.4}")?;
        writeln!(md, "- trainable parameters: {}", model.trainable_count())?;
        self.write_summary(&format!("train_{kind}"), &md)
    }

    pub fn variants(&self) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let base = self.base()?;
        let r = self.cfg.ranks;
        let mut set = VariantSet {
            base: base.clone(),
            m_reas: None,
            m_tool: None,
            m_unified: None,
            dart: None,
            failed: vec![],
        };
        let mut md = String::from("# variants\n\n| variant | steps | final mean reward |\n|---|---|---|\n");
        for kind in &self.cfg.variants {
            match train_variant(&base, &corpus, *kind, &self.cfg.train, r.single, (r.reasoning, r.tool)) {
                Ok((model, report)) => {
                    write_train_log(&report.rows, &self.path(&train_log_file(*kind)))?;
                    let last = report.rows.last().map_or(0.0, |r| r.mean_reward);
                    writeln!(md, "| {kind} | {} | {last:.4} |", report.rows.len())?;
                    *slot(&mut set, *kind) = Some(model);
                }
                Err(dartlab::Error::Diverged { step, .. }) => {
                    writeln!(md, "| {kind} | diverged at {step} | failed |")?;
                    set.failed.push(*kind);
                }
                Err(e) => return Err(e.into()),
            }
        }
        set.save(&self.path(VARIANTS_DIR))?;
        self.write_summary("variants", &md)
    }

    /// A variant's models: `<kind>.ckpt` from `train` if present, else the
    /// variant registry.
    pub fn variant_set(&self) -> anyhow::Result<VariantSet> {
        let registry = self.path(VARIANTS_DIR);
        let mut set = if registry.join(dartlab::variants::REGISTRY_FILE).exists() {
            VariantSet::load(&registry)?
        } else {
            VariantSet {
                base: self.base()?,
                m_reas: None,
                m_tool: None,
                m_unified: None,
                dart: None,
                failed: vec![],
            }
        };
        for kind in [
            VariantKind::MReas,
            VariantKind::MTool,
            VariantKind::MUnified,
            VariantKind::Dart,
        ] {
            let p = self.path(&format!("{kind}.ckpt"));
            if p.exists() {
                *slot(&mut set, kind) = Some(PolicyModel::load(&p)?);
            }
        }
        Ok(set)
    }

    fn test_questions<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Question> {
        QuestionSet::All.select(corpus, Split::Test)
    }

    pub fn eval(&self, kind: VariantKind) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let set = self.variant_set()?;
        if !set.available(kind) {
            bail!(
                "no trained `{kind}` in {}; run `dartlab train --variant {kind}` or `dartlab variants`",
                self.cfg.out.display()
            );
        }
        let agent = set.agent(kind)?;
        let qs = self.test_questions(&corpus);
        let ecfg = &self.cfg.eval;
        let records = evaluate(agent.as_ref(), &corpus, &qs, &ecfg.episode, ecfg.samples, self.cfg.seed)?;
        io::write_records(&records, &self.path(&episodes_file(kind.name())))?;
        let mut rows = Vec::new();
        for hops in [None, Some(1u8), Some(2u8)] {
            let sel: Vec<EpisodeRecord> = records
                .iter()
                .filter(|r| hops.is_none_or(|h| corpus.question(r.question_id).is_some_and(|q| q.hops == h)))
                .cloned()
                .collect();
            if sel.is_empty() {
                continue;
            }
            rows.push(EvalRow {
                variant: kind.name().into(),
                split: Split::Test.as_str().into(),
                hops: hops.map_or("all".into(), |h| h.to_string()),
                episodes: sel.len(),
                em: mean_reward(&sel),
                retrieval_accuracy: retrieval_accuracy(&sel)?,
            });
        }
        if kind == VariantKind::Dart {
            let model = set.dart.as_ref().expect("available");
            for (name, role) in [("dart_reas", Role::Reasoning), ("dart_tool", Role::Tool)] {
                let agent = single_ability_agent(model, role)?;
                let recs = evaluate(&agent, &corpus, &qs, &ecfg.episode, ecfg.samples, self.cfg.seed)?;
                rows.push(EvalRow {
                    variant: name.into(),
                    split: Split::Test.as_str().into(),
                    hops: "all".into(),
                    episodes: recs.len(),
                    em: mean_reward(&recs),
                    retrieval_accuracy: retrieval_accuracy(&recs)?,
                });
            }
        }
        let path = self.path(EVAL_FILE);
        let mut all: Vec<EvalRow> = if path.exists() { read_csv(&path)? } else { vec![] };
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        all.retain(|r| !names.contains(&r.variant.as_str()));
        all.extend(rows.iter().cloned());
        write_csv(&path, &all)?;
        let mut md = format!(
            "# eval {kind}\n\n| variant | hops | episodes | EM | retrieval accuracy |\n|---|---|---|---|---|\n"
        );
        for r in &rows {
            writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.4} |",
                r.variant, r.hops, r.episodes, r.em, r.retrieval_accuracy
            )?;
        }
        self.write_summary(&format!("eval_{kind}"), &md)
    }

    /// Evaluates `kind` with every search answered from `source`'s eval
    /// episodes.
    pub fn replay_eval(&self, kind: VariantKind, source: VariantKind) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let set = self.variant_set()?;
        let src = self.path(&episodes_file(source.name()));
        if !src.exists() {
            bail!(
                "{} not found; run `dartlab eval --variant {source}` first",
                src.display()
            );
        }
        let records = io::read_records(&src)?;
        let agent = set.agent(kind)?;
        let em = replay_eval(agent.as_ref(), &corpus, &records, &self.cfg.eval.episode, self.cfg.seed)?;
        let row = ReplayRow {
            variant: kind.name().into(),
            source: source.name().into(),
            episodes: records.len(),
            em,
        };
        let path = self.path(REPLAY_FILE);
        let mut all: Vec<ReplayRow> = if path.exists() { read_csv(&path)? } else { vec![] };
        all.retain(|r| !(r.variant == row.variant && r.source == row.source));
        all.push(row);
        write_csv(&path, &all)?;
        let md = format!(
            "# replay-eval\n\n{kind} answering from {source}'s retrievals: EM {em:.4} over {} episodes\n",
            records.len()
        );
        self.write_summary(&format!("replay_{kind}_from_{source}"), &md)
    }

    pub fn leas(&self) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let set = self.variant_set()?;
        let questions: Vec<&Question> = corpus.questions.iter().collect();
        let lc = self.cfg.leas;
        let (records, effects) = leas::run(
            &set,
            &corpus,
            &questions,
            lc.samples,
            &self.cfg.eval.episode,
            self.cfg.seed,
        )?;
        write_csv(&self.path(CORRECTNESS_FILE), &records)?;
        leas::write_coefficients(&effects, &self.path(leas::COEFFICIENTS_FILE))?;
        let agg = aggregate(&effects, &records, lc.bin_width)?;
        leas::write_histogram(&agg, &self.path(leas::HISTOGRAM_FILE))?;
        let mut md = String::from("# leas\n\n");
        let worst = effects.iter().map(|e| e.residual).fold(0.0, f64::max);
        writeln!(md, "- questions solved: {}", effects.len())?;
        writeln!(md, "- largest residual: {worst:.3e}")?;
        md.push_str(&histogram_markdown(&agg));
        self.write_summary("leas", &md)
    }

    pub fn gradangle(&self, kind: VariantKind) -> anyhow::Result<PathBuf> {
        let corpus = self.corpus()?;
        let set = self.variant_set()?;
        let model = set
            .model(kind)
            .with_context(|| format!("gradient angles need a single trained model; `{kind}` is not available"))?;
        let qs: Vec<&Question> = corpus
            .questions
            .iter()
            .filter(|q| self.cfg.gradangle.hops.is_none_or(|h| q.hops == h))
            .collect();
        let report = conflict_report(
            model,
            &corpus,
            &qs,
            self.cfg.gradangle.rollouts,
            &self.cfg.eval.episode,
            self.cfg.seed,
        )?;
        gradconflict::write_angles(&report, &self.path(gradconflict::ANGLES_FILE))?;
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut md = format!("# gradient angles ({kind})\n\n");
        writeln!(md, "- rollouts: {}", report.rollouts)?;
        writeln!(md, "- skipped pairs (zero gradient): {}", report.skipped)?;
        writeln!(md, "- mean cross-role angle: {}", fmt(report.mean_cross_role))?;
        writeln!(
            md,
            "- mean same-role angle, reasoning: {}",
            fmt(report.mean_same_role_r)
        )?;
        writeln!(md, "- mean same-role angle, tool: {}", fmt(report.mean_same_role_a))?;
        self.write_summary("gradangle", &md)
    }

    pub fn efficiency(&self) -> anyhow::Result<PathBuf> {
        let ec = &self.cfg.efficiency;
        let (backbone, adapter) = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let policy = self.cfg.policy.with_adapters(AdapterLayout::Dual {
                reasoning_rank: self.cfg.ranks.reasoning,
                tool_rank: self.cfg.ranks.tool,
            });
            let m = PolicyModel::new(policy, self.cfg.vocabulary().grammar, &mut rng)?;
            (m.backbone_count() as f64, m.trainable_count() as f64)
        };
        let turn_lengths = match &ec.turn_lengths {
            Some(t) => t.clone(),
            None => reference_handoffs(&self.corpus()?, self.cfg.train.top_k)?,
        };
        let inputs = EfficiencyInputs {
            backbone: ec.backbone_params.unwrap_or(backbone),
            adapter: ec.adapter_params.unwrap_or(adapter),
            turn_lengths,
        };
        let r = efficiency_model(&inputs)?;
        let rows = [
            ("params_units", "backbone", inputs.backbone),
            ("params_units", "adapter", inputs.adapter),
            ("memory_units", "2agent", r.cost_2agent),
            ("memory_units", "dart", r.cost_dart),
            ("memory_units", "ratio", r.ratio),
            ("memory_bytes", "2agent", r.bytes_2agent),
            ("memory_bytes", "dart", r.bytes_dart),
            ("memory_bytes", "ratio", r.bytes_ratio),
            ("reencode_token2", "2agent", r.reencode_2agent as f64),
            ("reencode_token2", "dart", r.reencode_dart as f64),
        ];
        let mut w = csv::Writer::from_path(self.path(EFFICIENCY_FILE))?;
        w.write_record(["quantity", "design", "value"])?;
        for (q, d, v) in rows {
            w.write_record([q, d, &v.to_string()])?;
        }
        w.flush()?;
        let mut md =
            String::from("# efficiency\n\n| quantity | two agents | routed adapters | ratio |\n|---|---|---|---|\n");
        writeln!(
            md,
            "| memory (parameter-equivalents) | {} | {} | {:.3} |",
            r.cost_2agent, r.cost_dart, r.ratio
        )?;
        writeln!(
            md,
            "| memory (bytes) | {} | {} | {:.3} |",
            r.bytes_2agent, r.bytes_dart, r.bytes_ratio
        )?;
        writeln!(
            md,
            "| re-encoded context (token²) | {} | {} | |",
            r.reencode_2agent, r.reencode_dart
        )?;
        writeln!(md, "\nhandoff context lengths: {:?}", inputs.turn_lengths)?;
        writeln!(
            md,
            "adapter share of backbone: {:.4} (typical regime: {})",
            inputs.adapter / inputs.backbone,
            r.typical_regime
        )?;
        self.write_summary("efficiency", &md)
    }

    /// Collates every CSV in the run directory into one Markdown file.
    pub fn report(&self) -> anyhow::Result<PathBuf> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.cfg.out)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        let mut md = String::from("# Run report\n\n");
        writeln!(
            md,
            "Run directory `{}`, seed {}.\n",
            self.cfg.out.display(),
            self.cfg.seed
        )?;
        let hist = self.path(leas::HISTOGRAM_FILE);
        if hist.exists() {
            md.push_str("## Interaction coefficient histogram\n\n");
            md.push_str(&csv_markdown(&hist, usize::MAX)?);
            md.push('\n');
        }
        for p in names.iter().filter(|p| **p != hist) {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            writeln!(md, "## {name}\n")?;
            md.push_str(&csv_markdown(p, 20)?);
            md.push('\n');
        }
        let path = self.path(REPORT_FILE);
        std::fs::write(&path, md)?;
        Ok(path)
    }
}

fn slot(set: &mut VariantSet, kind: VariantKind) -> &mut Option<PolicyModel> {
    match kind {
        VariantKind::MReas => &mut set.m_reas,
        VariantKind::MTool => &mut set.m_tool,
        VariantKind::MUnified => &mut set.m_unified,
        VariantKind::Dart => &mut set.dart,
        _ => unreachable!("only trained kinds have checkpoints"),
    }
}

/// Prefix lengths at which a reference two-hop trajectory hands over
/// between the reasoning and tool roles.
fn reference_handoffs(corpus: &Corpus, top_k: usize) -> anyhow::Result<Vec<u64>> {
    let q = corpus
        .questions
        .iter()
        .find(|q| q.hops == 2)
        .or(corpus.questions.first())
        .context("corpus has no questions")?;
    let traj = reference_trajectory(corpus, q, top_k)?;
    let roles = dartlab::router::generation_roles(&traj, &corpus.vocab.grammar);
    let mut out = Vec::new();
    let gen = |r: Role| if r == Role::Tool { Role::Tool } else { Role::Reasoning };
    for t in 1..roles.len() {
        if gen(roles[t]) != gen(roles[t - 1]) {
            out.push(t as u64);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct EvalRow {
    variant: String,
    split: String,
    hops: String,
    episodes: usize,
    em: f64,
    retrieval_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct ReplayRow {
    variant: String,
    source: String,
    episodes: usize,
    em: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn histogram_markdown(agg: &Aggregate) -> String {
    match agg {
        Aggregate::Empty => "\nNo question was answered correctly by any variant; nothing to histogram.\n".into(),
        Aggregate::Report(s) => {
            let mut md = format!(
                "- questions kept: {}\n- interference (λ23 < 0): {:.4}\n- synergy (λ23 > 0): {:.4}\n\n| λ23 bin | questions | mean accuracy |\n|---|---|---|\n",
                s.questions, s.interference_fraction, s.synergy_fraction
            );
            for b in &s.bins {
                let _ = writeln!(
                    md,
                    "| [{:.2}, {:.2}) | {} | {:.4} |",
                    b.bin_lo, b.bin_hi, b.count, b.mean_accuracy
                );
            }
            md
        }
    }
}

fn csv_markdown(path: &Path, max_rows: usize) -> anyhow::Result<String> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if n < max_rows {
            md.push_str(&format!("| {} |\n", rec.iter().collect::<Vec<_>>().join(" | ")));
        }
        n += 1;
    }
    if n > max_rows {
        md.push_str(&format!(
            "\n{} more rows in `{}`.\n",
            n - max_rows,
            path.file_name().unwrap_or_default().to_string_lossy()
        ));
    }
    Ok(md)
}
