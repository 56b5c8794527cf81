use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tseg_core::corpus::{
    load_dialogues, read_segmentations, splice_synthetic_corpus, write_dialogues, write_retrieval_tsv,
    write_segmentations, RetrievalGenerator, TopicGenerator,
};
use tseg_core::seg_metrics::{self, SegEvalReport, DEFAULT_WD_WINDOW};
use tseg_core::segmenter::{segment_corpus, texttiling, TextTilingConfig};

use crate::args::{ensure_parent, parse_range, positive, EncoderArgs, SegmenterArgs};
use crate::manifest::ManifestBuilder;
use crate::Global;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Greedy range/jump/window scan.
    Scan,
    Texttiling,
}

#[derive(Debug, Args)]
pub struct SegmentCmd {
    /// Dialogues as JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Segmentations as JSONL.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[arg(long, value_enum, default_value_t = Method::Scan)]
    method: Method,
}

#[derive(Serialize)]
struct SegmentRun<'a> {
    method: Method,
    encoder: &'a EncoderArgs,
    segmenter: &'a SegmenterArgs,
}

pub fn segment(cmd: &SegmentCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("segment", global.seed, global.threads);
    ensure_parent(&cmd.output)?;
    let config = cmd.segmenter.config()?;
    let encoder = cmd.encoder.build()?;
    let dialogues = load_dialogues(&cmd.input)?;
    log::info!("segmenting {} dialogues with {:?}", dialogues.len(), cmd.method);
    let segs = match cmd.method {
        Method::Scan => segment_corpus(&dialogues, &encoder, &config)?,
        Method::Texttiling => {
            let tt = TextTilingConfig::english();
            dialogues
                .par_iter()
                .map(|d| texttiling(d, &tt, &encoder))
                .collect::<tseg_core::Result<_>>()?
        }
    };
    write_segmentations(&cmd.output, &segs)?;
    let boundaries: usize = segs.iter().map(|s| s.boundaries.len()).sum();
    println!(
        "{} dialogues, {boundaries} boundaries -> {}",
        segs.len(),
        cmd.output.display()
    );
    m.input(&cmd.input).output(&cmd.output).config(&SegmentRun {
        method: cmd.method,
        encoder: &cmd.encoder,
        segmenter: &cmd.segmenter,
    })?;
    m.write(&cmd.output)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalSegCmd {
    /// Predicted segmentations as JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Reference dialogues with gold boundaries.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WD_WINDOW, value_parser = positive)]
    wd_window: usize,
    /// JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn print_seg_report(r: &SegEvalReport) {
    println!("{:<12}{:>10}", "dialogues", r.dialogues);
    println!("{:<12}{:>10.4}", "MAE", r.mae);
    println!("{:<12}{:>10.4}", format!("WD (k={})", r.wd_window), r.window_diff);
    println!("{:<12}{:>10.4}", "precision", r.precision);
    println!("{:<12}{:>10.4}", "recall", r.recall);
    println!("{:<12}{:>10.4}", "F1", r.f1);
}

pub fn eval_seg(cmd: &EvalSegCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("eval-seg", global.seed, global.threads);
    let preds = read_segmentations(&cmd.input)?;
    if preds.is_empty() {
        bail!("prediction file {} is empty", cmd.input.display());
    }
    let gold = load_dialogues(&cmd.gold)?;
    let report = seg_metrics::evaluate(&preds, &gold, cmd.wd_window)?;
    print_seg_report(&report);
    if let Some(out) = &cmd.output {
        ensure_parent(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        m.input(&cmd.input).input(&cmd.gold).output(out);
        m.config(&serde_json::json!({ "wd_window": cmd.wd_window }))?;
        m.write(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Spliced multi-topic dialogues with gold boundaries (JSONL).
    Dialogues,
    /// Context/response pairs with one positive and one negative per context (TSV).
    Retrieval,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    #[arg(long)]
    output: PathBuf,
    /// Single-topic source dialogues; the built-in generator is used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SynthKind::Dialogues)]
    kind: SynthKind,
    /// Topics per spliced dialogue, `lo-hi`.
    #[arg(long, default_value = "2-4", value_parser = parse_range)]
    topics: std::ops::RangeInclusive<usize>,
    /// Dialogues (or retrieval contexts) to produce.
    #[arg(long)]
    count: Option<usize>,
    /// Tokens in each topic's vocabulary.
    #[arg(long, default_value_t = 30)]
    vocab_size: usize,
    /// Utterances per source dialogue, `lo-hi`.
    #[arg(long, default_value = "4-8", value_parser = parse_range)]
    utterances: std::ops::RangeInclusive<usize>,
    /// Built-in single-topic dialogues to draw from.
    #[arg(long, default_value_t = 64)]
    sources: usize,
}

#[derive(Serialize)]
struct SynthRun {
    kind: SynthKind,
    topics: String,
    count: usize,
    vocab_size: usize,
    utterances: String,
    sources: Option<usize>,
}

pub fn synth(cmd: &SynthCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("synth", global.seed, global.threads);
    ensure_parent(&cmd.output)?;
    let span = |r: &std::ops::RangeInclusive<usize>| format!("{}-{}", r.start(), r.end());
    let count;
    match cmd.kind {
        SynthKind::Dialogues => {
            count = cmd.count.unwrap_or(200);
            let sources = match &cmd.input {
                Some(path) => {
                    m.input(path);
                    load_dialogues(path)?
                }
                None => TopicGenerator {
                    dialogues: cmd.sources,
                    vocab_size: cmd.vocab_size,
                    utterances: cmd.utterances.clone(),
                    ..TopicGenerator::default()
                }
                .generate(global.seed)?,
            };
            if sources.is_empty() {
                bail!("no source dialogues to splice");
            }
            let corpus = splice_synthetic_corpus(&sources, count, cmd.topics.clone(), global.seed)?;
            write_dialogues(&cmd.output, &corpus)?;
            println!("{} spliced dialogues -> {}", corpus.len(), cmd.output.display());
        }
        SynthKind::Retrieval => {
            if cmd.input.is_some() {
                bail!("--input is only used with --kind dialogues");
            }
            count = cmd.count.unwrap_or(10);
            let examples = RetrievalGenerator {
                contexts: count,
                vocab_size: cmd.vocab_size,
                ..RetrievalGenerator::default()
            }
            .generate(global.seed)?;
            write_retrieval_tsv(&cmd.output, &examples)?;
            println!("{} retrieval examples -> {}", examples.len(), cmd.output.display());
        }
    }
    m.output(&cmd.output).config(&SynthRun {
        kind: cmd.kind,
        topics: span(&cmd.topics),
        count,
        vocab_size: cmd.vocab_size,
        utterances: span(&cmd.utterances),
        sources: cmd.input.is_none().then_some(cmd.sources),
    })?;
    m.write(&cmd.output)?;
    Ok(())
}
