//! `trafficlm`: runs one pipeline stage per invocation and prints a one-line JSON summary.

mod config;
mod error;
mod stages;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "trafficlm", version, about = "Generative pre-training on NetFlow traffic")]
struct Cli {
    /// Pipeline config (JSON). Built-in demo settings when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for intermediate artifacts; overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Seed copied into every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config leaf, e.g. `--set train.max_epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Write synthetic flows, node registry and attack labels.
    GenSynthetic,
    /// Aggregate flows into per-split raw feature tensors.
    Ingest,
    /// Fit bins on the training split and tokenize every split.
    Discretize,
    /// Pre-train the decoder on next-minute prediction.
    Pretrain,
    /// Validation and test perplexity against the bigram baseline.
    Evaluate,
    /// Fit the survival head on validation windows and pick the threshold.
    Finetune,
    /// Score test windows with the fine-tuned head.
    Detect,
    /// Detection metrics from the last `detect` run.
    Report,
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::GenSynthetic => "gen-synthetic",
            Stage::Ingest => "ingest",
            Stage::Discretize => "discretize",
            Stage::Pretrain => "pretrain",
            Stage::Evaluate => "evaluate",
            Stage::Finetune => "finetune",
            Stage::Detect => "detect",
            Stage::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        workdir: cli.workdir,
        set: cli.set,
    };
    let result = PipelineConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| {
        if cli.print_config {
            return Ok(serde_json::to_value(&cfg)?);
        }
        stages::run(cli.stage.name(), &cfg)
    });
    match result {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
