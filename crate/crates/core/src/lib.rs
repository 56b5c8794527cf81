//! Topic-aware segmentation of multi-turn dialogues and a topic-aware
//! dual-attention matching head for response selection.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] holds the data model and the JSONL / TSV readers and writers.
//! * [`encoders`] turns token sequences into vectors (term frequency,
//!   word-embedding mean, precomputed per-utterance vectors).
//! * [`segmenter`] implements the greedy topic segmenter and a TextTiling
//!   baseline.
//! * [`seg_metrics`] and [`retrieval_metrics`] evaluate segmentations and
//!   candidate rankings.
//! * [`numerics`] is a small dense tensor kernel with hand-written backward
//!   passes, gradient checking, Adam, and a checkpoint format.
//! * [`matcher`] is the matching network built on top of `numerics`.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod matcher;
pub mod numerics;
pub mod retrieval_metrics;
pub mod seg_metrics;
pub mod segmenter;

pub use error::{Error, Result};
