//! Topic-aware dual-attention matching for response selection.
//!
//! A context arrives as topic segments. Each segment is weighted by how well
//! it matches the candidate response ([`model::word_level_weights`] from a
//! token-level interaction map, [`model::segment_level_weights`] from mean
//! vectors), matched against the response in both directions by an attentive
//! module, and the per-segment matching vectors are aggregated by a GRU and
//! a last-segment head into one score in `(0, 1)`.
//!
//! Every switch of [`MatcherConfig`] changes the computation, not only the
//! output: parameter groups that a variant does not use are not allocated.

mod config;
pub mod model;
mod params;
mod prepare;
mod train;

pub use config::{Fuse, MatchSide, MatcherConfig, Pool, ABLATIONS};
pub use model::{
    aggregate_and_score, attentive_module, attentive_module_backward, backward, combine_weights, dual_cross_match,
    forward, loss, loss_and_grad, score, segment_level_weights, weight_context, word_level_weights, Forward,
    LOSS_CLAMP,
};
pub use params::{AttentiveParams, MatcherParams, Vocab, WordWeightParams};
pub use prepare::{
    apply_budget, encode, prepare, prepare_tokens, split_segments, truncate_response, Embedder, EncodedContext,
    TokenIds,
};
pub use train::{mean_loss, prepare_dataset, score_candidates, train, PreparedExample, TrainConfig, TrainReport};
