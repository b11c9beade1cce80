use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dartlab::variants::VariantKind;
use dartlab_cli::{ExperimentConfig, Run};

#[derive(Parser)]
#[command(
    name = "dartlab",
    version,
    about = "Interference attribution and routed dual-adapter training on a tiny tool-using policy"
)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "DARTLAB_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on demonstrations.
    Pretrain,
    /// Train one variant's adapters from the pretrained backbone.
    Train {
        #[arg(long, default_value = "dart")]
        variant: VariantKind,
    },
    /// Train every configured variant and write the variant registry.
    Variants,
    /// Exact match and retrieval accuracy on the test split.
    Eval {
        #[arg(long, default_value = "dart")]
        variant: VariantKind,
    },
    /// Evaluate with searches answered from another variant's episodes.
    ReplayEval {
        #[arg(long)]
        variant: VariantKind,
        /// Variant whose recorded episodes supply the retrievals.
        #[arg(long, default_value = "m_unified")]
        from: VariantKind,
    },
    /// Per-question effect attribution over the six variants.
    Leas,
    /// Role-gradient angles of one trained model.
    Gradangle {
        #[arg(long, default_value = "m_unified")]
        variant: VariantKind,
    },
    /// Memory and context-switch cost model.
    Efficiency,
    /// Collate all CSV artifacts into report.md.
    Report,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let run = Run::new(cfg)?;
    let summary = match cli.command {
        Command::Pretrain => run.pretrain()?,
        Command::Train { variant } => run.train(variant)?,
        Command::Variants => run.variants()?,
        Command::Eval { variant } => run.eval(variant)?,
        Command::ReplayEval { variant, from } => run.replay_eval(variant, from)?,
        Command::Leas => run.leas()?,
        Command::Gradangle { variant } => run.gradangle(variant)?,
        Command::Efficiency => run.efficiency()?,
        Command::Report => run.report()?,
    };
    print!("{}", std::fs::read_to_string(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
