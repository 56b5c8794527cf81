//! Ranking metrics over groups of scored candidates: R_n@k, MAP, MRR, P@1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedGroup {
    pub id: String,
    pub candidates: Vec<Candidate>,
}

impl RankedGroup {
    pub fn new(id: impl Into<String>, candidates: Vec<Candidate>) -> Self {
        Self {
            id: id.into(),
            candidates,
        }
    }

    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }

    /// Candidate indices from best to worst; equal scores keep their original order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.candidates[b].score.total_cmp(&self.candidates[a].score));
        order
    }

    /// 1-based ranks of the positive candidates, ascending.
    fn positive_ranks(&self) -> Vec<usize> {
        self.ranking()
            .iter()
            .enumerate()
            .filter(|(_, &c)| self.candidates[c].label == 1)
            .map(|(r, _)| r + 1)
            .collect()
    }
}

/// Groups that carry at least one positive; the others are skipped with a warning.
fn scorable(groups: &[RankedGroup]) -> Result<Vec<&RankedGroup>> {
    let kept: Vec<&RankedGroup> = groups
        .iter()
        .filter(|g| {
            let ok = g.positives() > 0;
            if !ok {
                log::warn!("group {} has no positive candidate; excluded", g.id);
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("no group has a positive candidate".into()));
    }
    Ok(kept)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Share of a group's positives ranked in the top `k`, averaged over groups.
pub fn recall_at_k(groups: &[RankedGroup], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.candidates.len() < k) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {} candidates of group {}",
            g.candidates.len(),
            g.id
        )));
    }
    let groups = scorable(groups)?;
    Ok(mean(groups.iter().map(|g| {
        let ranks = g.positive_ranks();
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    })))
}

pub fn mean_average_precision(groups: &[RankedGroup]) -> Result<f64> {
    let groups = scorable(groups)?;
    Ok(mean(groups.iter().map(|g| {
        let ranks = g.positive_ranks();
        mean(ranks.iter().enumerate().map(|(j, &r)| (j + 1) as f64 / r as f64))
    })))
}

pub fn mean_reciprocal_rank(groups: &[RankedGroup]) -> Result<f64> {
    let groups = scorable(groups)?;
    Ok(mean(groups.iter().map(|g| 1.0 / g.positive_ranks()[0] as f64)))
}

pub fn p_at_1(groups: &[RankedGroup]) -> Result<f64> {
    let groups = scorable(groups)?;
    Ok(mean(groups.iter().map(|g| {
        let top = g.ranking()[0];
        f64::from(g.candidates[top].label)
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub groups: usize,
    /// Candidates per group (the `n` of R_n@k); the minimum when groups differ.
    pub candidates: usize,
    /// `(k, R_n@k)` for every requested `k` not exceeding `candidates`.
    pub recall: Vec<(usize, f64)>,
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
}

pub fn evaluate(groups: &[RankedGroup], ks: &[usize]) -> Result<RetrievalReport> {
    let n = groups
        .iter()
        .map(|g| g.candidates.len())
        .min()
        .ok_or_else(|| Error::InvalidArgument("no groups to evaluate".into()))?;
    let recall = ks
        .iter()
        .filter(|&&k| k <= n)
        .map(|&k| recall_at_k(groups, k).map(|v| (k, v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport {
        groups: groups.len(),
        candidates: n,
        recall,
        map: mean_average_precision(groups)?,
        mrr: mean_reciprocal_rank(groups)?,
        p_at_1: p_at_1(groups)?,
    })
}

/// Reads `group_id \t candidate_index \t score \t label` rows.
///
/// Groups keep the order of their first row; candidates are placed by index.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<RankedGroup>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, Candidate)>> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let index: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(format!("candidate index: {e}")))?;
        let score: f64 = fields[2].parse().map_err(|e| parse_err(format!("score: {e}")))?;
        let label = match fields[3].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("label must be 0 or 1, found {other:?}"))),
        };
        let id = fields[0].to_string();
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((index, Candidate { score, label }));
    }
    order
        .into_iter()
        .map(|id| {
            let mut cands = rows.remove(&id).unwrap_or_default();
            cands.sort_by_key(|(i, _)| *i);
            if cands.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
                return Err(Error::Validation {
                    id,
                    message: "candidate indices must be 0..n without gaps or repeats".into(),
                });
            }
            Ok(RankedGroup::new(id, cands.into_iter().map(|(_, c)| c).collect()))
        })
        .collect()
}

pub fn write_scores(path: impl AsRef<Path>, groups: &[RankedGroup]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for g in groups {
        for (i, c) in g.candidates.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", g.id, i, c.score, c.label).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}
