//! Dialogues, gold segmentations and retrieval examples, plus their file formats.
//!
//! Boundary convention used everywhere in the crate: a boundary `b` means the
//! cut between utterance `b` and utterance `b + 1`, counting utterances from 1.
//! A dialogue of `n` utterances therefore admits boundaries in `1..=n-1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Range, RangeInclusive};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases `text` and splits it on every non-alphanumeric character.
///
/// Punctuation never survives as a token, so `"I'll"` becomes `["i", "ll"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: Option<String>,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(speaker: Option<String>, text: impl Into<String>) -> Self {
        Self::with_tokenizer(speaker, text, tokenize)
    }

    /// Builds an utterance with a caller-supplied tokenizer.
    pub fn with_tokenizer(
        speaker: Option<String>,
        text: impl Into<String>,
        tokenizer: impl Fn(&str) -> Vec<String>,
    ) -> Self {
        let text = text.into();
        let tokens = tokenizer(&text);
        Self { speaker, text, tokens }
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Self::new(None, text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub gold_boundaries: Option<Vec<usize>>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>, gold_boundaries: Option<Vec<usize>>) -> Result<Self> {
        let dialogue = Self {
            id: id.into(),
            utterances,
            gold_boundaries,
        };
        dialogue.validate()?;
        Ok(dialogue)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: "dialogue has no utterances".into(),
            });
        }
        if let Some(gold) = &self.gold_boundaries {
            check_boundaries(gold, self.len()).map_err(|message| Error::Validation {
                id: self.id.clone(),
                message,
            })?;
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<&[String]> {
        self.utterances.iter().map(|u| u.tokens.as_slice()).collect()
    }
}

/// Checks the boundary invariants for a dialogue of `n` utterances.
pub(crate) fn check_boundaries(boundaries: &[usize], n: usize) -> std::result::Result<(), String> {
    for (pos, &b) in boundaries.iter().enumerate() {
        if b == 0 || b >= n {
            return Err(format!(
                "boundary {b} out of range 1..={} for {n} utterances",
                n.saturating_sub(1)
            ));
        }
        if pos > 0 && boundaries[pos - 1] >= b {
            return Err(format!(
                "boundaries must be strictly increasing, found {} before {b}",
                boundaries[pos - 1]
            ));
        }
    }
    Ok(())
}

fn check_order(boundaries: &[usize]) -> std::result::Result<(), String> {
    if let Some(&0) = boundaries.first() {
        return Err("boundary 0 is not a valid cut".into());
    }
    match boundaries.windows(2).find(|w| w[0] >= w[1]) {
        Some(w) => Err(format!(
            "boundaries must be strictly increasing, found {} before {}",
            w[0], w[1]
        )),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSegmentation {
    pub dialogue_id: String,
    pub boundaries: Vec<usize>,
}

impl TopicSegmentation {
    pub fn new(dialogue_id: impl Into<String>, boundaries: Vec<usize>) -> Result<Self> {
        let seg = Self {
            dialogue_id: dialogue_id.into(),
            boundaries,
        };
        check_order(&seg.boundaries).map_err(|message| Error::InvalidSegmentation {
            id: seg.dialogue_id.clone(),
            message,
        })?;
        Ok(seg)
    }

    pub fn segment_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Validates the boundaries against a dialogue of `n` utterances.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        check_boundaries(&self.boundaries, n).map_err(|message| Error::InvalidSegmentation {
            id: self.dialogue_id.clone(),
            message,
        })
    }

    /// Zero-based, half-open utterance ranges of each segment.
    pub fn segments(&self, n: usize) -> Vec<Range<usize>> {
        segment_ranges(&self.boundaries, n)
    }
}

/// Converts boundaries into zero-based half-open ranges covering `0..n`.
pub fn segment_ranges(boundaries: &[usize], n: usize) -> Vec<Range<usize>> {
    let mut ranges = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries {
        ranges.push(start..b);
        start = b;
    }
    ranges.push(start..n);
    ranges
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalExample {
    pub context: Vec<Utterance>,
    pub response: Utterance,
    pub label: u8,
    /// Candidates answering the same context share a group id.
    pub group: usize,
}

impl RetrievalExample {
    pub fn new(context: Vec<Utterance>, response: Utterance, label: u8, group: usize) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::InvalidArgument("retrieval context is empty".into()));
        }
        if label > 1 {
            return Err(Error::InvalidArgument(format!("label {label} is not 0 or 1")));
        }
        Ok(Self {
            context,
            response,
            label,
            group,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    speaker: Option<String>,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
    #[serde(default)]
    gold_boundaries: Option<Vec<usize>>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, line)| (i + 1, line)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let mut dialogues = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Validation {
                id: record.id,
                message: format!("duplicate id at line {line_no}"),
            });
        }
        let utterances = record
            .utterances
            .into_iter()
            .map(|u| Utterance::new(u.speaker, u.text))
            .collect();
        dialogues.push(Dialogue::new(record.id, utterances, record.gold_boundaries)?);
    }
    Ok(dialogues)
}

pub fn write_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    for d in dialogues {
        d.validate()?;
    }
    let mut out = create(path)?;
    for d in dialogues {
        let record = DialogueRecord {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                })
                .collect(),
            gold_boundaries: d.gold_boundaries.clone(),
        };
        let line = serde_json::to_string(&record).expect("dialogue records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads the `label \t utt_1 \t ... \t utt_k \t response` format.
///
/// Consecutive lines with an identical context are assigned the same group.
pub fn load_retrieval_tsv(path: impl AsRef<Path>) -> Result<Vec<RetrievalExample>> {
    let path = path.as_ref();
    let mut examples: Vec<RetrievalExample> = Vec::new();
    let mut group = 0usize;
    let mut last_context: Option<Vec<String>> = None;
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = match fields[0].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let context_text: Vec<String> = fields[1..fields.len() - 1].iter().map(|s| s.to_string()).collect();
        if let Some(prev) = &last_context {
            if *prev != context_text {
                group += 1;
            }
        }
        let context = context_text.iter().map(Utterance::from_text).collect();
        let response = Utterance::from_text(fields[fields.len() - 1]);
        examples.push(RetrievalExample::new(context, response, label, group)?);
        last_context = Some(context_text);
    }
    Ok(examples)
}

pub fn write_retrieval_tsv(path: impl AsRef<Path>, examples: &[RetrievalExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    for ex in examples {
        let mut fields = vec![ex.label.to_string()];
        fields.extend(ex.context.iter().map(|u| u.text.replace('\t', " ")));
        fields.push(ex.response.text.replace('\t', " "));
        writeln!(out, "{}", fields.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes segmentations as JSONL. Refuses boundaries that are not strictly increasing.
pub fn write_segmentations(path: impl AsRef<Path>, segmentations: &[TopicSegmentation]) -> Result<()> {
    let path = path.as_ref();
    for seg in segmentations {
        check_order(&seg.boundaries).map_err(|message| Error::InvalidSegmentation {
            id: seg.dialogue_id.clone(),
            message,
        })?;
    }
    let mut out = create(path)?;
    for seg in segmentations {
        let line = serde_json::to_string(seg).expect("segmentations always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_segmentations(path: impl AsRef<Path>) -> Result<Vec<TopicSegmentation>> {
    let path = path.as_ref();
    let mut segs = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: TopicSegmentation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        segs.push(TopicSegmentation::new(seg.dialogue_id, seg.boundaries)?);
    }
    Ok(segs)
}

/// Joins randomly drawn single-topic dialogues into multi-topic ones.
///
/// Every input dialogue counts as one topic; an output dialogue concatenates
/// `topics` distinct inputs (drawn uniformly from the range) and carries a gold
/// boundary at every junction.
pub fn splice_synthetic_corpus(
    dialogues: &[Dialogue],
    count: usize,
    topics: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<Dialogue>> {
    let (lo, hi) = (*topics.start(), *topics.end());
    if lo < 1 || lo > hi {
        return Err(Error::InvalidArgument(format!("invalid topic range {lo}-{hi}")));
    }
    if dialogues.len() < hi {
        return Err(Error::InvalidArgument(format!(
            "need at least {hi} source dialogues to splice up to {hi} topics, found {}",
            dialogues.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let k = rng.gen_range(lo..=hi);
        let picks = index::sample(&mut rng, dialogues.len(), k);
        let mut utterances = Vec::new();
        let mut gold = Vec::with_capacity(k - 1);
        for (pos, pick) in picks.iter().enumerate() {
            if pos > 0 {
                gold.push(utterances.len());
            }
            utterances.extend(dialogues[pick].utterances.iter().cloned());
        }
        out.push(Dialogue::new(format!("splice-{i:05}"), utterances, Some(gold))?);
    }
    Ok(out)
}

/// Parameters of the built-in single-topic dialogue generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicGenerator {
    /// Number of single-topic dialogues to produce; each owns a private vocabulary.
    pub dialogues: usize,
    pub vocab_size: usize,
    pub utterances: RangeInclusive<usize>,
    pub tokens_per_utterance: RangeInclusive<usize>,
}

impl Default for TopicGenerator {
    fn default() -> Self {
        Self {
            dialogues: 64,
            vocab_size: 30,
            utterances: 4..=8,
            tokens_per_utterance: 5..=10,
        }
    }
}

impl TopicGenerator {
    /// Token `k` of topic `topic`. Purely alphanumeric so the tokenizer keeps it whole.
    pub fn word(topic: usize, k: usize) -> String {
        format!("t{topic}w{k}")
    }

    /// Generates dialogues whose vocabularies are pairwise disjoint.
    pub fn generate(&self, seed: u64) -> Result<Vec<Dialogue>> {
        if self.vocab_size == 0 || self.utterances.is_empty() || self.tokens_per_utterance.is_empty() {
            return Err(Error::InvalidArgument("empty generator ranges".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.dialogues);
        for topic in 0..self.dialogues {
            let n = rng.gen_range(self.utterances.clone());
            let utterances = (0..n)
                .map(|turn| {
                    let len = rng.gen_range(self.tokens_per_utterance.clone());
                    let words: Vec<String> = (0..len)
                        .map(|_| Self::word(topic, rng.gen_range(0..self.vocab_size)))
                        .collect();
                    let speaker = if turn % 2 == 0 { "A" } else { "B" };
                    Utterance::new(Some(speaker.to_string()), words.join(" "))
                })
                .collect();
            out.push(Dialogue::new(format!("topic-{topic:04}"), utterances, None)?);
        }
        Ok(out)
    }
}

/// Parameters of the synthetic response-selection set.
///
/// Context `i` and its positive response draw from topic `i`; its negative
/// response draws from a topic that no context uses. Each context yields one
/// positive and one negative, in random order, sharing group id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGenerator {
    pub contexts: usize,
    pub vocab_size: usize,
    pub turns: RangeInclusive<usize>,
    pub tokens_per_utterance: RangeInclusive<usize>,
}

impl Default for RetrievalGenerator {
    fn default() -> Self {
        Self {
            contexts: 10,
            vocab_size: 30,
            turns: 2..=4,
            tokens_per_utterance: 4..=8,
        }
    }
}

impl RetrievalGenerator {
    pub fn generate(&self, seed: u64) -> Result<Vec<RetrievalExample>> {
        if self.contexts == 0 || self.vocab_size == 0 || self.turns.is_empty() || self.tokens_per_utterance.is_empty() {
            return Err(Error::InvalidArgument("empty generator ranges".into()));
        }
        if *self.turns.start() == 0 {
            return Err(Error::InvalidArgument("contexts need at least one turn".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utterance = |rng: &mut ChaCha8Rng, topic: usize| {
            let len = rng.gen_range(self.tokens_per_utterance.clone());
            let words: Vec<String> = (0..len)
                .map(|_| TopicGenerator::word(topic, rng.gen_range(0..self.vocab_size)))
                .collect();
            Utterance::from_text(words.join(" "))
        };
        let mut out = Vec::with_capacity(2 * self.contexts);
        for group in 0..self.contexts {
            let turns = rng.gen_range(self.turns.clone());
            let context: Vec<Utterance> = (0..turns).map(|_| utterance(&mut rng, group)).collect();
            let positive = utterance(&mut rng, group);
            let negative = utterance(&mut rng, self.contexts + group);
            let mut pair = [(positive, 1), (negative, 0)];
            if rng.gen_bool(0.5) {
                pair.swap(0, 1);
            }
            for (response, label) in pair {
                out.push(RetrievalExample::new(context.clone(), response, label, group)?);
            }
        }
        Ok(out)
    }
}
