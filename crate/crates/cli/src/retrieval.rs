use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use tseg_core::corpus::{load_retrieval_tsv, Dialogue, RetrievalExample, TopicSegmentation};
use tseg_core::encoders::{load_glove_text, Encoder};
use tseg_core::matcher::{self, Embedder, MatcherConfig, MatcherParams, TrainConfig, Vocab};
use tseg_core::numerics::{load_params, save_params};
use tseg_core::retrieval_metrics::{self, read_scores, write_scores, Candidate, RankedGroup, RetrievalReport};
use tseg_core::segmenter::{segment_dialogue, SegmenterConfig};

use crate::args::{ensure_parent, sidecar, EncoderArgs, EncoderKind, MatcherArgs, SegmenterArgs};
use crate::manifest::ManifestBuilder;
use crate::Global;

/// Recall cutoffs reported by `eval-retrieval`, filtered to the group size.
const RECALL_KS: [usize; 3] = [1, 2, 5];

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Labelled examples: `label \t context utterances... \t response`.
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint path; config, vocabulary, loss trace and manifest go beside it.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[command(flatten)]
    matcher: MatcherArgs,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
}

#[derive(Debug, Args)]
pub struct ScoreCmd {
    /// Candidates in the training format; labels are carried through.
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scores file: `group \t candidate \t score \t label`.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    segmenter: SegmenterArgs,
    #[command(flatten)]
    matcher: MatcherArgs,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalCmd {
    /// Scores file written by `score`.
    #[arg(long)]
    input: PathBuf,
    /// JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Segments each distinct context once; examples of a group share its context.
fn segment_contexts(
    examples: &[RetrievalExample],
    encoder: &Encoder,
    config: &SegmenterConfig,
) -> Result<Vec<TopicSegmentation>> {
    let mut firsts: Vec<usize> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if i == 0 || examples[i - 1].group != ex.group {
            firsts.push(i);
        }
    }
    let segs: Vec<TopicSegmentation> = firsts
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let d = Dialogue::new(ex.group.to_string(), ex.context.clone(), None)?;
            segment_dialogue(&d, encoder, config)
        })
        .collect::<tseg_core::Result<_>>()?;
    let mut out = Vec::with_capacity(examples.len());
    let mut k = 0;
    for (i, _) in examples.iter().enumerate() {
        if k + 1 < firsts.len() && firsts[k + 1] == i {
            k += 1;
        }
        out.push(segs[k].clone());
    }
    Ok(out)
}

fn load_examples(path: &Path) -> Result<Vec<RetrievalExample>> {
    let examples = load_retrieval_tsv(path)?;
    if examples.is_empty() {
        bail!("{} holds no examples", path.display());
    }
    Ok(examples)
}

/// The frozen table doubles as the token embedding when segmentation uses word
/// vectors; otherwise the matcher learns its own table.
fn frozen_table(encoder: &EncoderArgs) -> Result<Option<Embedder>> {
    match (encoder.encoder, &encoder.glove_path) {
        (EncoderKind::Glove, Some(path)) => Ok(Some(Embedder::Frozen(load_glove_text(path)?))),
        (EncoderKind::Glove, None) => bail!("--encoder glove requires --glove-path"),
        _ => Ok(None),
    }
}

#[derive(Serialize)]
struct TrainRun<'a> {
    encoder: &'a EncoderArgs,
    segmenter: &'a SegmenterArgs,
    matcher: &'a MatcherConfig,
    train: &'a TrainConfig,
    examples: usize,
    vocabulary: Option<usize>,
    final_loss: Option<f64>,
}

pub fn train(cmd: &TrainCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("train", global.seed, global.threads);
    ensure_parent(&cmd.output)?;
    let config = cmd.matcher.resolve(MatcherConfig::default())?;
    let seg_config = cmd.segmenter.config()?;
    let encoder = cmd.encoder.build()?;
    let examples = load_examples(&cmd.input)?;
    let segs = segment_contexts(&examples, &encoder, &seg_config)?;
    let pairs: Vec<_> = examples.into_iter().zip(segs).collect();
    let data = matcher::prepare_dataset(&pairs, &config)?;

    let (embedder, vocab) = match frozen_table(&cmd.encoder)? {
        Some(frozen) => (frozen, None),
        None => {
            let vocab = Vocab::from_tokens(data.iter().flat_map(|e| e.segments.iter().flatten().chain(&e.response)));
            (Embedder::Toy(vocab.clone()), Some(vocab))
        }
    };
    let mut params = MatcherParams::new(&config, vocab.as_ref().map(Vocab::len), global.seed)?;
    let train = TrainConfig {
        learning_rate: cmd.lr,
        batch_size: cmd.batch,
        steps: cmd.steps,
        seed: global.seed,
        ..TrainConfig::default()
    };
    log::info!(
        "training on {} examples, {} parameters, {} steps",
        data.len(),
        params.names().len(),
        train.steps
    );
    let report = matcher::train(&data, &config, &embedder, &mut params, &train)?;
    let final_loss = matcher::mean_loss(&data, &config, &embedder, &params)?;
    println!("mean training loss {final_loss:.6} after {} steps", train.steps);

    save_params(&cmd.output, &params)?;
    let config_path = sidecar(&cmd.output, "config");
    std::fs::write(&config_path, config.to_kv_text())?;
    let trace_path = sidecar(&cmd.output, "losses.tsv");
    let mut trace = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    writeln!(trace, "step\tloss")?;
    for (i, l) in report.step_losses.iter().enumerate() {
        writeln!(trace, "{i}\t{l}")?;
    }
    trace.flush()?;

    m.input(&cmd.input)
        .output(&cmd.output)
        .output(&config_path)
        .output(&trace_path);
    if let Some(v) = &vocab {
        let vocab_path = sidecar(&cmd.output, "vocab");
        v.write(&vocab_path)?;
        m.output(&vocab_path);
    }
    m.config(&TrainRun {
        encoder: &cmd.encoder,
        segmenter: &cmd.segmenter,
        matcher: &config,
        train: &train,
        examples: data.len(),
        vocabulary: vocab.as_ref().map(Vocab::len),
        final_loss: Some(final_loss),
    })?;
    m.write(&cmd.output)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRun<'a> {
    checkpoint: &'a Path,
    encoder: &'a EncoderArgs,
    segmenter: &'a SegmenterArgs,
    matcher: &'a MatcherConfig,
}

pub fn score(cmd: &ScoreCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("score", global.seed, global.threads);
    ensure_parent(&cmd.output)?;
    let config_path = sidecar(&cmd.checkpoint, "config");
    let stored = std::fs::read_to_string(&config_path)
        .with_context(|| format!("reading checkpoint config {}", config_path.display()))?;
    let stored = MatcherConfig::from_kv_text(&stored).with_context(|| format!("in {}", config_path.display()))?;
    let config = cmd.matcher.resolve(stored)?;

    let embedder = match frozen_table(&cmd.encoder)? {
        Some(frozen) => frozen,
        None => {
            let path = sidecar(&cmd.checkpoint, "vocab");
            Embedder::Toy(Vocab::read(&path).with_context(|| format!("reading vocabulary {}", path.display()))?)
        }
    };
    let mut params = MatcherParams::new(&config, embedder.vocab_size(), global.seed)?;
    load_params(&cmd.checkpoint, &mut params).with_context(|| {
        format!(
            "checkpoint {} does not fit the resolved config",
            cmd.checkpoint.display()
        )
    })?;

    let seg_config = cmd.segmenter.config()?;
    let encoder = cmd.encoder.build()?;
    let examples = load_examples(&cmd.input)?;
    let segs = segment_contexts(&examples, &encoder, &seg_config)?;
    let scores: Vec<f64> = examples
        .par_iter()
        .zip(&segs)
        .map(|(ex, seg)| {
            let (segments, response) = matcher::prepare_tokens(&ex.context, &ex.response, seg, &config)?;
            let ctx = matcher::encode(&segments, &response, &config, &embedder, &params)?;
            matcher::score(&params, &config, &ctx)
        })
        .collect::<tseg_core::Result<_>>()?;

    let mut groups: Vec<RankedGroup> = Vec::new();
    for (i, (ex, s)) in examples.iter().zip(scores).enumerate() {
        let candidate = Candidate {
            score: s,
            label: ex.label,
        };
        if i > 0 && examples[i - 1].group == ex.group {
            groups.last_mut().expect("a group is open").candidates.push(candidate);
        } else {
            groups.push(RankedGroup::new(ex.group.to_string(), vec![candidate]));
        }
    }
    write_scores(&cmd.output, &groups)?;
    println!(
        "scored {} candidates in {} groups -> {}",
        examples.len(),
        groups.len(),
        cmd.output.display()
    );
    m.input(&cmd.input).input(&cmd.checkpoint).output(&cmd.output);
    m.config(&ScoreRun {
        checkpoint: &cmd.checkpoint,
        encoder: &cmd.encoder,
        segmenter: &cmd.segmenter,
        matcher: &config,
    })?;
    m.write(&cmd.output)?;
    Ok(())
}

pub fn print_retrieval_report(r: &RetrievalReport) {
    let n = r.candidates;
    println!("{:<10}{:>10}", "groups", r.groups);
    for (k, v) in &r.recall {
        println!("{:<10}{:>10.4}", format!("R{n}@{k}"), v);
    }
    println!("{:<10}{:>10.4}", "MAP", r.map);
    println!("{:<10}{:>10.4}", "MRR", r.mrr);
    println!("{:<10}{:>10.4}", "P@1", r.p_at_1);
}

pub fn eval_retrieval(cmd: &EvalRetrievalCmd, global: &Global) -> Result<()> {
    let mut m = ManifestBuilder::new("eval-retrieval", global.seed, global.threads);
    let groups = read_scores(&cmd.input)?;
    if groups.is_empty() {
        bail!("scores file {} is empty", cmd.input.display());
    }
    let report = retrieval_metrics::evaluate(&groups, &RECALL_KS)?;
    print_retrieval_report(&report);
    if let Some(out) = &cmd.output {
        ensure_parent(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        m.input(&cmd.input).output(out);
        m.config(&serde_json::json!({ "recall_ks": RECALL_KS }))?;
        m.write(out)?;
    }
    Ok(())
}
