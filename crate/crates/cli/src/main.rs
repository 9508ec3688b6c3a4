//! `ul2prune`: corpus preparation, packing, pruning, training and
//! evaluation for the toy compression pipeline, driven by one TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ul2prune::{Error, Result};

use commands::{PackObjective, SweepKind};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ul2prune", version, about = "Staged pruning of a toy encoder-decoder with UL2-family recovery")]
struct Cli {
    /// TOML run config; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override as a dotted key, e.g. `pipeline.vocab_keep=1500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, dedup or summarize a JSONL corpus.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Pack the corpus into fixed-shape examples.
    Pack {
        #[arg(long, value_enum)]
        objective: PackObjective,
        /// JSONL corpus used as is; defaults to the configured corpus.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Padding statistics of a packed-example file.
    Padstats { input: PathBuf },
    /// Prune a checkpoint or sweep direct pruning.
    Prune {
        #[command(subcommand)]
        action: PruneCmd,
    },
    /// Run one stage (0 is base pretraining) from a parent checkpoint.
    Train {
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        parent: Option<PathBuf>,
    },
    /// Base pretraining, five pruning stages and the vocabulary cut.
    Pipeline,
    /// Dev perplexity and per-noiser losses of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Scrub private data, clean, keep Chinese and English documents.
    Clean {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Drop duplicate documents and paragraphs.
    Dedup {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Document counts, language mix and dedup drops.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PruneCmd {
    Layers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["enc_drop", "dec_drop"])]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        enc_drop: usize,
        #[arg(long, default_value_t = 0)]
        dec_drop: usize,
    },
    Neurons {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["hidden", "ffn", "heads"])]
        plan: Option<PathBuf>,
        #[arg(long, requires_all = ["ffn", "heads"])]
        hidden: Option<usize>,
        #[arg(long, requires_all = ["hidden", "heads"])]
        ffn: Option<usize>,
        #[arg(long, requires_all = ["hidden", "ffn"])]
        heads: Option<usize>,
    },
    Vocab {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, conflicts_with = "keep")]
        plan: Option<PathBuf>,
        /// Vocabulary size to keep (default: the config's `vocab_keep`).
        #[arg(long)]
        keep: Option<usize>,
    },
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: SweepKind,
    },
}

/// Exit status for each error family.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Plan(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) | Error::Parse { .. } | Error::Input(_) => 4,
        Error::Dimension(_) | Error::Contract(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.sets;
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &sets)?;
    let out = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Corpus { action } => match action {
            CorpusCmd::Clean { input } => commands::corpus_clean(&cfg, input.as_deref(), &out),
            CorpusCmd::Dedup { input } => commands::corpus_dedup(&cfg, input.as_deref(), &out),
            CorpusCmd::Stats { input } => commands::corpus_stats(&cfg, input.as_deref(), &out),
        },
        Command::Pack { objective, input, tokenizer } => {
            commands::pack(&cfg, objective, input.as_deref(), tokenizer.as_deref(), &out)
        }
        Command::Padstats { input } => commands::padstats(&input, &out),
        Command::Prune { action } => match action {
            PruneCmd::Layers { checkpoint, plan, enc_drop, dec_drop } => {
                commands::prune_layers_cmd(&checkpoint, plan.as_deref(), (enc_drop, dec_drop), &out)
            }
            PruneCmd::Neurons { checkpoint, plan, hidden, ffn, heads } => {
                let targets = hidden.zip(ffn).zip(heads).map(|((h, f), n)| (h, f, n));
                commands::prune_neurons_cmd(&cfg, &checkpoint, plan.as_deref(), targets, &out)
            }
            PruneCmd::Vocab { checkpoint, tokenizer, plan, keep } => {
                commands::prune_vocab_cmd(&cfg, &checkpoint, tokenizer.as_deref(), plan.as_deref(), keep, &out)
            }
            PruneCmd::Sweep { checkpoint, tokenizer, kind } => {
                commands::prune_sweep_cmd(&cfg, &checkpoint, tokenizer.as_deref(), kind, &out)
            }
        },
        Command::Train { stage, parent } => commands::train(&cfg, stage, parent.as_deref(), &out),
        Command::Pipeline => commands::pipeline(&cfg, &out),
        Command::Eval { checkpoint, tokenizer } => commands::eval(&cfg, &checkpoint, tokenizer.as_deref(), &out).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
