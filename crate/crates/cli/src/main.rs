//! `tseg`: dialogue topic segmentation and topic-aware response selection.

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod args;
mod manifest;
mod retrieval;
mod segmentation;

#[derive(Debug, Parser)]
#[command(name = "tseg", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 13)]
    pub seed: u64,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, value_parser = args::positive)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment dialogues into topic segments.
    Segment(segmentation::SegmentCmd),
    /// Score predicted segmentations against gold boundaries.
    EvalSeg(segmentation::EvalSegCmd),
    /// Train the response matcher.
    Train(retrieval::TrainCmd),
    /// Score candidate responses with a trained matcher.
    Score(retrieval::ScoreCmd),
    /// Ranking metrics of a scores file.
    EvalRetrieval(retrieval::EvalRetrievalCmd),
    /// Generate a synthetic corpus.
    Synth(segmentation::SynthCmd),
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TSEG_LOG", "warn"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    eprintln!("seed {}", cli.global.seed);
    let g = &cli.global;
    match &cli.command {
        Command::Segment(c) => segmentation::segment(c, g),
        Command::EvalSeg(c) => segmentation::eval_seg(c, g),
        Command::Train(c) => retrieval::train(c, g),
        Command::Score(c) => retrieval::score(c, g),
        Command::EvalRetrieval(c) => retrieval::eval_retrieval(c, g),
        Command::Synth(c) => segmentation::synth(c, g),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
