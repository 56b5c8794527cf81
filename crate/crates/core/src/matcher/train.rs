use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::model::{backward, forward, loss, score};
use super::prepare::{encode, prepare_tokens};
use super::{Embedder, MatcherConfig, MatcherParams};
use crate::corpus::{RetrievalExample, TopicSegmentation, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 8,
            steps: 500,
            seed: 13,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean loss over the examples seen in each (possibly partial) epoch.
    pub epoch_losses: Vec<f64>,
}

/// One truncated example, ready to be embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub segments: Vec<Vec<String>>,
    pub response: Vec<String>,
    pub label: u8,
}

pub fn prepare_dataset(
    dataset: &[(RetrievalExample, TopicSegmentation)],
    config: &MatcherConfig,
) -> Result<Vec<PreparedExample>> {
    dataset
        .iter()
        .map(|(ex, seg)| {
            let (segments, response) = prepare_tokens(&ex.context, &ex.response, seg, config)?;
            Ok(PreparedExample {
                segments,
                response,
                label: ex.label,
            })
        })
        .collect()
}

fn first_non_finite(params: &MatcherParams) -> Option<String> {
    params
        .params()
        .into_iter()
        .find(|p| !p.value.all_finite() || !p.grad.all_finite())
        .map(|p| p.name.clone())
}

/// Loss and gradients of one example, computed on a private copy of the parameters.
fn example_grads(
    params: &MatcherParams,
    config: &MatcherConfig,
    embedder: &Embedder,
    ex: &PreparedExample,
    scale: f64,
    step: usize,
) -> Result<(f64, MatcherParams)> {
    let mut local = params.clone();
    local.zero_grad();
    let ctx = encode(&ex.segments, &ex.response, config, embedder, &local)?;
    let f = forward(&local, config, &ctx)?;
    if !f.score.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            parameter: "none; the forward pass overflowed".into(),
        });
    }
    let l = backward(&mut local, config, &ctx, &f, ex.label, scale)?;
    Ok((l, local))
}

/// Mini-batch Adam on binary cross-entropy.
///
/// Batches are shuffled per epoch from `train.seed`; per-example gradients may be
/// computed in parallel but are reduced in batch order, so results do not depend
/// on the thread count.
pub fn train(
    dataset: &[PreparedExample],
    config: &MatcherConfig,
    embedder: &Embedder,
    params: &mut MatcherParams,
    train: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut adam = Adam::new(train.adam());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport {
        step_losses: Vec::with_capacity(train.steps),
        epoch_losses: Vec::new(),
    };
    let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
    params.zero_grad();
    for step in 0..train.steps {
        if let Some(name) = first_non_finite(params) {
            return Err(Error::NonFiniteLoss { step, parameter: name });
        }
        if cursor >= order.len() {
            if epoch_count > 0 {
                report.epoch_losses.push(epoch_sum / epoch_count as f64);
                (epoch_sum, epoch_count) = (0.0, 0);
            }
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + train.batch_size).min(order.len())];
        cursor += batch.len();
        let scale = 1.0 / batch.len() as f64;
        let snapshot: &MatcherParams = params;
        let results: Vec<(f64, MatcherParams)> = batch
            .par_iter()
            .map(|&i| example_grads(snapshot, config, embedder, &dataset[i], scale, step))
            .collect::<Result<_>>()?;
        let mut batch_loss = 0.0;
        for (l, grads) in &results {
            batch_loss += l;
            params.accumulate_grads(grads)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                parameter: first_non_finite(params).unwrap_or_else(|| "none; inputs produced it".into()),
            });
        }
        epoch_sum += batch_loss;
        epoch_count += batch.len();
        report.step_losses.push(batch_loss * scale);
        adam.step(params);
        if let Some(name) = first_non_finite(params) {
            return Err(Error::NonFiniteLoss { step, parameter: name });
        }
        log::debug!("step {step}: loss {:.6}", batch_loss * scale);
    }
    if epoch_count > 0 {
        report.epoch_losses.push(epoch_sum / epoch_count as f64);
    }
    Ok(report)
}

/// Mean loss over `dataset` under the current parameters.
pub fn mean_loss(
    dataset: &[PreparedExample],
    config: &MatcherConfig,
    embedder: &Embedder,
    params: &MatcherParams,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let losses: Vec<f64> = dataset
        .par_iter()
        .map(|ex| {
            let ctx = encode(&ex.segments, &ex.response, config, embedder, params)?;
            Ok(loss(score(params, config, &ctx)?, ex.label))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Scores every candidate against the same context and ranks them best first;
/// equal scores keep their input order.
pub fn score_candidates(
    context: &[Utterance],
    candidates: &[Utterance],
    segmentation: &TopicSegmentation,
    params: &MatcherParams,
    config: &MatcherConfig,
    embedder: &Embedder,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to score".into()));
    }
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (segments, response) = prepare_tokens(context, c, segmentation, config)?;
            let ctx = encode(&segments, &response, config, embedder, params)?;
            Ok((i, score(params, config, &ctx)?))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}
