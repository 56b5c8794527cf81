use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MatcherConfig;
use crate::error::{Error, Result};
use crate::numerics::{GruParams, Parameter, Parameters, Tensor};

/// Token vocabulary of the trainable embedding table; row 0 is the unknown token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: &'static str = "<unk>";

    /// Sorted distinct tokens after the unknown token.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let distinct: BTreeSet<&String> = tokens.into_iter().filter(|t| t.as_str() != Self::UNK).collect();
        let tokens: Vec<String> = std::iter::once(Self::UNK.to_string())
            .chain(distinct.into_iter().cloned())
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self.tokens.iter().map(|t| format!("{t}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(Self::UNK) {
            return Err(Error::Parse {
                line: 1,
                message: format!("vocabulary must start with {}", Self::UNK),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }
}

/// Word-level weighting: diagonal interaction `W` (d×h), channel projection `V` (h),
/// and the pooled-feature head `W′` (2L) with one shared bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WordWeightParams {
    pub w: Parameter,
    pub v: Parameter,
    pub w_pool: Parameter,
    pub b: Parameter,
}

/// Attention followed by layer normalization and a ReLU feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub ln_gain: Parameter,
    pub ln_bias: Parameter,
}

/// All learnable tensors. Which groups exist, and their widths, follow the config.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub word: Option<WordWeightParams>,
    pub attentive: AttentiveParams,
    pub gru: Option<GruParams>,
    pub w3: Option<Parameter>,
    pub b3: Option<Parameter>,
    pub w4: Parameter,
    pub b4: Parameter,
    pub embedding: Option<Parameter>,
}

// Each group draws from its own stream so that variants sharing a group
// start from identical values.
const STREAM_WORD: u64 = 1;
const STREAM_ATTENTIVE: u64 = 2;
const STREAM_GRU: u64 = 3;
const STREAM_LAST: u64 = 4;
const STREAM_HEAD: u64 = 5;
const STREAM_EMBEDDING: u64 = 6;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform(name: &str, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Parameter {
    Parameter::new(name, Tensor::random(shape, scale, rng))
}

fn zeros(name: &str, shape: &[usize]) -> Parameter {
    Parameter::new(name, Tensor::zeros(shape))
}

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

impl MatcherParams {
    /// Random initialization. `vocab_size` adds a trainable embedding table.
    pub fn new(config: &MatcherConfig, vocab_size: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, h, l) = (config.dim, config.channels, config.max_seg_len);
        let (m, agg, ff) = (config.match_width(), config.aggregate_width(), config.ffn_width());

        let word = config.use_word_weights.then(|| {
            let r = &mut rng(seed, STREAM_WORD);
            WordWeightParams {
                w: uniform("word.w", &[d, h], 1.0, r),
                v: uniform("word.v", &[h], fan_in(h), r),
                w_pool: uniform("word.w_pool", &[2 * l], fan_in(2 * l), r),
                b: zeros("word.b", &[1]),
            }
        });
        let r = &mut rng(seed, STREAM_ATTENTIVE);
        let attentive = AttentiveParams {
            w1: uniform("attentive.w1", &[d, ff], fan_in(d), r),
            b1: zeros("attentive.b1", &[ff]),
            w2: uniform("attentive.w2", &[ff, d], fan_in(ff), r),
            b2: zeros("attentive.b2", &[d]),
            ln_gain: Parameter::new("attentive.ln_gain", Tensor::vector(vec![1.0; d])?),
            ln_bias: zeros("attentive.ln_bias", &[d]),
        };
        let gru = config
            .use_multi_turn_match
            .then(|| GruParams::random("gru", m, m, &mut rng(seed, STREAM_GRU)));
        let (w3, b3) = if config.use_last_segment_match {
            let r = &mut rng(seed, STREAM_LAST);
            (
                Some(uniform("last.w3", &[m, m], fan_in(m), r)),
                Some(zeros("last.b3", &[m])),
            )
        } else {
            (None, None)
        };
        let r = &mut rng(seed, STREAM_HEAD);
        let w4 = uniform("head.w4", &[agg], fan_in(agg), r);
        let b4 = zeros("head.b4", &[1]);
        let embedding = match vocab_size {
            Some(0) => return Err(Error::InvalidArgument("vocabulary is empty".into())),
            Some(v) => Some(uniform("embedding", &[v, d], 0.5, &mut rng(seed, STREAM_EMBEDDING))),
            None => None,
        };
        Ok(Self {
            word,
            attentive,
            gru,
            w3,
            b3,
            w4,
            b4,
            embedding,
        })
    }

    /// Same layout with every value and gradient set to zero.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.value.fill(0.0);
            p.zero_grad();
        }
        z
    }

    pub fn names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }
}

impl Parameters for AttentiveParams {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.ln_gain, &self.ln_bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }
}

impl Parameters for MatcherParams {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(w) = &self.word {
            out.extend([&w.w, &w.v, &w.w_pool, &w.b]);
        }
        out.extend(self.attentive.params());
        if let Some(g) = &self.gru {
            out.extend(g.params());
        }
        out.extend(self.w3.iter().chain(&self.b3));
        out.extend([&self.w4, &self.b4]);
        out.extend(&self.embedding);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.word {
            out.extend([&mut w.w, &mut w.v, &mut w.w_pool, &mut w.b]);
        }
        out.extend(self.attentive.params_mut());
        if let Some(g) = &mut self.gru {
            out.extend(g.params_mut());
        }
        out.extend(self.w3.iter_mut().chain(self.b3.iter_mut()));
        out.extend([&mut self.w4, &mut self.b4]);
        out.extend(self.embedding.iter_mut());
        out
    }
}
