use super::{MatcherConfig, MatcherParams, Vocab};
use crate::corpus::{RetrievalExample, TopicSegmentation, Utterance};
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Source of token vectors.
#[derive(Debug, Clone)]
pub enum Embedder {
    /// Rows of the trainable `embedding` parameter, looked up through the vocabulary.
    Toy(Vocab),
    /// Fixed vectors; unknown tokens map to the zero vector.
    Frozen(EmbeddingTable),
}

impl Embedder {
    /// Rows needed in the trainable table, if any.
    pub fn vocab_size(&self) -> Option<usize> {
        match self {
            Embedder::Toy(v) => Some(v.len()),
            Embedder::Frozen(_) => None,
        }
    }
}

/// Token ids behind each position of an [`EncodedContext`]; padding holds 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenIds {
    pub segments: Vec<Vec<usize>>,
    pub response: Vec<usize>,
}

/// Padded context and response tensors with their masks.
///
/// Valid segments occupy the first slots; valid tokens may sit anywhere their mask says.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    /// `[T, L, d]`
    pub segments: Tensor,
    pub segment_token_mask: Vec<Vec<bool>>,
    pub segment_mask: Vec<bool>,
    /// `[L, d]`
    pub response: Tensor,
    pub response_mask: Vec<bool>,
    pub token_ids: Option<TokenIds>,
}

impl EncodedContext {
    pub fn n_valid(&self) -> usize {
        self.segment_mask.iter().take_while(|&&v| v).count()
    }

    pub fn slots(&self) -> usize {
        self.segment_mask.len()
    }

    pub fn max_len(&self) -> usize {
        self.response_mask.len()
    }

    pub fn dim(&self) -> usize {
        self.segments.cols()
    }

    /// Positions of the valid tokens of segment slot `i`.
    pub fn segment_positions(&self, i: usize) -> Vec<usize> {
        positions(&self.segment_token_mask[i])
    }

    pub fn response_positions(&self) -> Vec<usize> {
        positions(&self.response_mask)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, l) = (self.slots(), self.max_len());
        let d = self.dim();
        if self.segments.shape() != [t, l, d] || self.response.shape() != [l, d] {
            return Err(Error::Shape(format!(
                "context {:?} and response {:?} for T={t}, L={l}",
                self.segments.shape(),
                self.response.shape()
            )));
        }
        let n = self.n_valid();
        if n == 0 || self.segment_mask[n..].iter().any(|&v| v) {
            return Err(Error::InvalidArgument(
                "segment mask must be a non-empty run of valid slots followed by padding".into(),
            ));
        }
        if self.segment_token_mask.len() != t || self.segment_token_mask.iter().any(|m| m.len() != l) {
            return Err(Error::Shape("segment token mask does not match [T, L]".into()));
        }
        if (0..n).any(|i| !self.segment_token_mask[i].contains(&true)) || !self.response_mask.contains(&true) {
            return Err(Error::AllMasked);
        }
        Ok(())
    }
}

fn positions(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

/// Splits the context by `segmentation`, drops token-empty segments, keeps the
/// last `max_segments` segments and the last `max_seg_len` tokens of each.
pub fn split_segments(
    context: &[Utterance],
    segmentation: &TopicSegmentation,
    config: &MatcherConfig,
) -> Result<Vec<Vec<String>>> {
    segmentation.validate_for(context.len())?;
    let mut segments: Vec<Vec<String>> = segmentation
        .segments(context.len())
        .into_iter()
        .map(|r| {
            context[r]
                .iter()
                .flat_map(|u| u.tokens.iter().cloned())
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect();
    if segments.len() > config.max_segments {
        segments.drain(..segments.len() - config.max_segments);
    }
    for s in &mut segments {
        if s.len() > config.max_seg_len {
            s.drain(..s.len() - config.max_seg_len);
        }
    }
    Ok(segments)
}

/// The first `max_seg_len` response tokens, the ones adjacent to the context.
pub fn truncate_response(tokens: &[String], config: &MatcherConfig) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("response has no tokens".into()));
    }
    Ok(tokens[..tokens.len().min(config.max_seg_len)].to_vec())
}

/// Drops the earliest segments until context plus response fit the token budget.
pub fn apply_budget(mut segments: Vec<Vec<String>>, response_len: usize, budget: usize) -> Result<Vec<Vec<String>>> {
    let mut total: usize = segments.iter().map(Vec::len).sum::<usize>() + response_len;
    let mut drop = 0;
    while total > budget && drop < segments.len() {
        total -= segments[drop].len();
        drop += 1;
    }
    segments.drain(..drop);
    if segments.is_empty() {
        return Err(Error::InvalidArgument("context is empty after truncation".into()));
    }
    Ok(segments)
}

/// Embeds already-truncated segments and response into padded tensors.
pub fn encode(
    segments: &[Vec<String>],
    response: &[String],
    config: &MatcherConfig,
    embedder: &Embedder,
    params: &MatcherParams,
) -> Result<EncodedContext> {
    let (t, l, d) = (config.max_segments, config.max_seg_len, config.dim);
    if segments.is_empty() || segments.len() > t || segments.iter().any(|s| s.is_empty() || s.len() > l) {
        return Err(Error::InvalidArgument(format!(
            "segments must number 1..={t} with 1..={l} tokens each"
        )));
    }
    if response.is_empty() || response.len() > l {
        return Err(Error::InvalidArgument(format!("response must have 1..={l} tokens")));
    }
    let lookup: Box<dyn Fn(&str) -> (usize, Vec<f64>) + '_> = match embedder {
        Embedder::Toy(vocab) => {
            let table = params.embedding.as_ref().ok_or_else(|| Error::Parameter {
                name: "embedding".into(),
                message: "a trainable embedding table is required by the toy embedder".into(),
            })?;
            if table.value.shape() != [vocab.len(), d] {
                return Err(Error::Parameter {
                    name: "embedding".into(),
                    message: format!(
                        "shape {:?}, vocabulary and config need [{}, {d}]",
                        table.value.shape(),
                        vocab.len()
                    ),
                });
            }
            Box::new(move |tok: &str| {
                let id = vocab.id(tok);
                (id, table.value.row(id).to_vec())
            })
        }
        Embedder::Frozen(table) => {
            if table.dim() != d {
                return Err(Error::Dimension {
                    left: table.dim(),
                    right: d,
                });
            }
            Box::new(move |tok: &str| {
                let v = table
                    .get(tok)
                    .map(|v| v.values().iter().map(|&x| f64::from(x)).collect())
                    .unwrap_or_else(|| vec![0.0; d]);
                (0, v)
            })
        }
    };
    let mut seg = Tensor::zeros(&[t, l, d]);
    let mut seg_mask = vec![vec![false; l]; t];
    let mut seg_ids = vec![vec![0; l]; t];
    for (i, s) in segments.iter().enumerate() {
        for (j, tok) in s.iter().enumerate() {
            let (id, v) = lookup(tok);
            seg.data_mut()[(i * l + j) * d..(i * l + j + 1) * d].copy_from_slice(&v);
            seg_mask[i][j] = true;
            seg_ids[i][j] = id;
        }
    }
    let mut resp = Tensor::zeros(&[l, d]);
    let mut resp_mask = vec![false; l];
    let mut resp_ids = vec![0; l];
    for (j, tok) in response.iter().enumerate() {
        let (id, v) = lookup(tok);
        resp.row_mut(j).copy_from_slice(&v);
        resp_mask[j] = true;
        resp_ids[j] = id;
    }
    let mut segment_mask = vec![false; t];
    segment_mask[..segments.len()].iter_mut().for_each(|v| *v = true);
    Ok(EncodedContext {
        segments: seg,
        segment_token_mask: seg_mask,
        segment_mask,
        response: resp,
        response_mask: resp_mask,
        token_ids: matches!(embedder, Embedder::Toy(_)).then_some(TokenIds {
            segments: seg_ids,
            response: resp_ids,
        }),
    })
}

/// Truncated token-level view of one example, ready for [`encode`].
pub fn prepare_tokens(
    context: &[Utterance],
    response: &Utterance,
    segmentation: &TopicSegmentation,
    config: &MatcherConfig,
) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let response = truncate_response(&response.tokens, config)?;
    let segments = apply_budget(
        split_segments(context, segmentation, config)?,
        response.len(),
        config.token_budget,
    )?;
    Ok((segments, response))
}

pub fn prepare(
    example: &RetrievalExample,
    segmentation: &TopicSegmentation,
    config: &MatcherConfig,
    embedder: &Embedder,
    params: &MatcherParams,
) -> Result<EncodedContext> {
    let (segments, response) = prepare_tokens(&example.context, &example.response, segmentation, config)?;
    encode(&segments, &response, config, embedder, params)
}
