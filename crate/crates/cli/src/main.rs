//! Pipeline orchestration binary.
//!
//! Subcommands mirror the stages (`prepare-data` through `evaluate`) plus
//! `run-all`; each stage writes its artifacts and a manifest into the work
//! dir and reruns are no-ops while inputs and config stay unchanged.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;
use manifest::WorkDirLock;
use stages::{run_all, run_stage, StagePaths};

#[derive(Parser)]
#[command(name = "hirec", about = "Hierarchical multi-interest retrieval pipeline")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, short, default_value = "hirec.toml")]
    config: PathBuf,

    /// Override one config value, e.g. --set miner.beam_size=4.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Rerun the stage even when its manifest is up to date.
    #[arg(long)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse interactions, preprocess, and split users into train/test.
    PrepareData,
    /// Build co-occurrence item embeddings from training sequences.
    BuildEmbeddings,
    /// Build the hierarchical k-means category tree.
    BuildTaxonomy,
    /// Train the interest miner.
    TrainMiner,
    /// Train the two-tower retrieval model (and the unified baseline).
    TrainRetrieval,
    /// Run the evaluation protocol over test users.
    Evaluate,
    /// Run every stage in order.
    RunAll,
}

impl Command {
    fn stage_name(&self) -> Option<&'static str> {
        match self {
            Command::PrepareData => Some("prepare-data"),
            Command::BuildEmbeddings => Some("build-embeddings"),
            Command::BuildTaxonomy => Some("build-taxonomy"),
            Command::TrainMiner => Some("train-miner"),
            Command::TrainRetrieval => Some("train-retrieval"),
            Command::Evaluate => Some("evaluate"),
            Command::RunAll => None,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let cfg = match PipelineConfig::load(&cli.config, &cli.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };

    let work_dir = cfg.effective_work_dir();
    let paths = StagePaths::new(work_dir.clone());
    let _lock = match WorkDirLock::acquire(&work_dir) {
        Ok(lock) => lock,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let outcome = match cli.command.stage_name() {
        Some(stage) => run_stage(stage, &cfg, &paths, cli.force).map(|ran| {
            if !ran {
                println!("{stage}: up to date, skipping");
            }
        }),
        None => run_all(&cfg, &paths, cli.force),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
