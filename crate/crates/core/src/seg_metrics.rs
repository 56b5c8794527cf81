//! Segmentation metrics: MAE of segment counts, WindowDiff, boundary F1.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::{check_boundaries, Dialogue, TopicSegmentation};
use crate::error::{Error, Result};

/// Window size used for WindowDiff unless configured otherwise.
pub const DEFAULT_WD_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        // an empty prediction is perfectly precise only when nothing was to be found
        let precision = ratio(hits, predicted, if gold == 0 { 1.0 } else { 0.0 });
        let recall = ratio(hits, gold, if predicted == 0 { 1.0 } else { 0.0 });
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DialogueEval {
    pub id: String,
    pub utterances: usize,
    pub predicted_segments: usize,
    pub gold_segments: usize,
    pub window_diff: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus-level report. Precision/recall/F1 pool boundary counts over all
/// dialogues; WindowDiff is the unweighted mean of the per-dialogue values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegEvalReport {
    pub dialogues: usize,
    pub wd_window: usize,
    pub mae: f64,
    pub window_diff: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_dialogue: Vec<DialogueEval>,
}

/// Pairs predictions with references by dialogue id, in reference order.
pub fn pair_by_id<'a, G>(
    predictions: &'a [TopicSegmentation],
    references: &'a [G],
    id_of: impl Fn(&G) -> &str,
) -> Result<Vec<(&'a TopicSegmentation, &'a G)>> {
    let by_id: HashMap<&str, &TopicSegmentation> = predictions.iter().map(|p| (p.dialogue_id.as_str(), p)).collect();
    let mut missing: Vec<String> = references
        .iter()
        .map(&id_of)
        .filter(|id| !by_id.contains_key(id))
        .map(str::to_string)
        .collect();
    let reference_ids: std::collections::HashSet<&str> = references.iter().map(&id_of).collect();
    missing.extend(
        predictions
            .iter()
            .filter(|p| !reference_ids.contains(p.dialogue_id.as_str()))
            .map(|p| p.dialogue_id.clone()),
    );
    if !missing.is_empty() {
        return Err(Error::UnmatchedIds(missing));
    }
    Ok(references.iter().map(|g| (by_id[id_of(g)], g)).collect())
}

/// Mean absolute difference between predicted and reference segment counts.
pub fn mae(predictions: &[TopicSegmentation], references: &[TopicSegmentation]) -> Result<f64> {
    let pairs = pair_by_id(predictions, references, |g| g.dialogue_id.as_str())?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no dialogues to evaluate".into()));
    }
    let total: usize = pairs
        .iter()
        .map(|(p, g)| p.segment_count().abs_diff(g.segment_count()))
        .sum();
    Ok(total as f64 / pairs.len() as f64)
}

/// WindowDiff with a binary penalty per window.
///
/// Window `i` spans utterances `i..=i+k` (1-based) and counts the boundaries
/// strictly inside it, i.e. `b` with `i <= b < i + k`. When `n <= k` a single
/// window covering the whole dialogue is compared.
pub fn window_diff(pred: &[usize], gold: &[usize], n: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("WindowDiff window must be >= 1".into()));
    }
    for (which, b) in [("prediction", pred), ("reference", gold)] {
        check_boundaries(b, n).map_err(|message| Error::InvalidSegmentation {
            id: which.into(),
            message,
        })?;
    }
    if n <= k {
        return Ok(if pred.len() == gold.len() { 0.0 } else { 1.0 });
    }
    // prefix[c] = number of boundaries b with b < c
    let prefix = |bs: &[usize]| {
        let mut p = vec![0usize; n + 1];
        for &b in bs {
            p[b + 1] += 1;
        }
        for c in 1..=n {
            p[c] += p[c - 1];
        }
        p
    };
    let (pp, gp) = (prefix(pred), prefix(gold));
    let windows = n - k;
    let errors = (1..=windows)
        .filter(|&i| pp[i + k] - pp[i] != gp[i + k] - gp[i])
        .count();
    Ok(errors as f64 / windows as f64)
}

/// Exact-position boundary precision, recall and F1.
pub fn boundary_f1(pred: &[usize], gold: &[usize]) -> Prf {
    let hits = count_hits(pred, gold);
    Prf::from_counts(hits, pred.len(), gold.len())
}

fn count_hits(pred: &[usize], gold: &[usize]) -> usize {
    let gold: std::collections::HashSet<usize> = gold.iter().copied().collect();
    pred.iter().filter(|b| gold.contains(b)).count()
}

/// Scores predictions against dialogues carrying gold boundaries.
pub fn evaluate(predictions: &[TopicSegmentation], gold: &[Dialogue], wd_window: usize) -> Result<SegEvalReport> {
    if predictions.is_empty() || gold.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to evaluate: empty predictions or references".into(),
        ));
    }
    let pairs = pair_by_id(predictions, gold, |d| d.id.as_str())?;
    let mut per_dialogue = Vec::with_capacity(pairs.len());
    let (mut hits, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    let mut abs_err = 0usize;
    let mut wd_sum = 0.0;
    for (pred, dialogue) in pairs {
        let reference = dialogue.gold_boundaries.as_deref().ok_or_else(|| Error::Validation {
            id: dialogue.id.clone(),
            message: "reference dialogue has no gold boundaries".into(),
        })?;
        pred.validate_for(dialogue.len())?;
        let wd = window_diff(&pred.boundaries, reference, dialogue.len(), wd_window)?;
        let prf = boundary_f1(&pred.boundaries, reference);
        hits += count_hits(&pred.boundaries, reference);
        n_pred += pred.boundaries.len();
        n_gold += reference.len();
        abs_err += pred.boundaries.len().abs_diff(reference.len());
        wd_sum += wd;
        per_dialogue.push(DialogueEval {
            id: dialogue.id.clone(),
            utterances: dialogue.len(),
            predicted_segments: pred.segment_count(),
            gold_segments: reference.len() + 1,
            window_diff: wd,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        });
    }
    let count = per_dialogue.len() as f64;
    let prf = Prf::from_counts(hits, n_pred, n_gold);
    Ok(SegEvalReport {
        dialogues: per_dialogue.len(),
        wd_window,
        mae: abs_err as f64 / count,
        window_diff: wd_sum / count,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        per_dialogue,
    })
}
