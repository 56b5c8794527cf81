use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use tseg_core::encoders::{load_glove_text, load_precomputed, Encoder};
use tseg_core::matcher::MatcherConfig;
use tseg_core::segmenter::SegmenterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Tf,
    Glove,
    Precomputed,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EncoderArgs {
    /// Utterance representation used for segmentation similarity.
    #[arg(long, value_enum, default_value_t = EncoderKind::Tf)]
    pub encoder: EncoderKind,
    /// Whitespace-separated word vectors, one token per line.
    #[arg(long)]
    pub glove_path: Option<PathBuf>,
    /// Binary store of precomputed utterance vectors.
    #[arg(long)]
    pub emb_path: Option<PathBuf>,
}

impl EncoderArgs {
    pub fn build(&self) -> Result<Encoder> {
        let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
            p.clone().with_context(|| {
                format!(
                    "--encoder {} requires {flag}",
                    self.encoder.to_possible_value().unwrap().get_name()
                )
            })
        };
        Ok(match self.encoder {
            EncoderKind::Tf => Encoder::TermFrequency,
            EncoderKind::Glove => Encoder::Embedding(load_glove_text(need(&self.glove_path, "--glove-path")?)?),
            EncoderKind::Precomputed => Encoder::Precomputed(load_precomputed(need(&self.emb_path, "--emb-path")?)?),
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SegmenterArgs {
    /// Longest candidate segment, in utterances.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub range: usize,
    /// Candidate lengths are multiples of this.
    #[arg(long, default_value_t = 2, value_parser = positive)]
    pub jump: usize,
    /// Context utterances on each side of a candidate.
    #[arg(long, default_value_t = 2, value_parser = positive)]
    pub window: usize,
    /// Cut only when the best candidate cost is at most this.
    #[arg(long, default_value_t = 0.6, allow_hyphen_values = true)]
    pub threshold: f64,
}

impl SegmenterArgs {
    pub fn config(&self) -> Result<SegmenterConfig> {
        let config = SegmenterConfig {
            range: self.range,
            jump: self.jump,
            window: self.window,
            threshold: self.threshold,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatcherArgs {
    /// Flat key=value matcher config; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Share of the word-level weights when both weightings are on.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_segments: Option<usize>,
    #[arg(long)]
    pub max_seg_len: Option<usize>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Channels of the word-level interaction map.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Config overrides such as `use_word_weights=false,match_pool=max`.
    #[arg(long)]
    pub variant: Option<String>,
}

impl MatcherArgs {
    /// Applies the config file (or `base`) and then every explicit flag.
    pub fn resolve(&self, base: MatcherConfig) -> Result<MatcherConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                MatcherConfig::from_kv_text(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => base,
        };
        let flags = [
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("max_segments", self.max_segments.map(|v| v.to_string())),
            ("max_seg_len", self.max_seg_len.map(|v| v.to_string())),
            ("token_budget", self.token_budget.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        if let Some(spec) = &self.variant {
            config.apply_overrides(spec).context("in --variant")?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Value parser for counts that must be at least 1.
pub fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Parses `lo-hi` or a single number.
pub fn parse_range(s: &str) -> std::result::Result<RangeInclusive<usize>, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo == 0 || lo > hi {
        return Err(format!("invalid range {s:?}; expected lo-hi with 1 <= lo <= hi"));
    }
    Ok(lo..=hi)
}

/// `model.ckpt` + `vocab` gives `model.ckpt.vocab`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.exists() {
            bail!("output directory {} does not exist", dir.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("2-4").unwrap(), 2..=4);
        assert_eq!(parse_range("3").unwrap(), 3..=3);
        assert!(parse_range("4-2").is_err());
        assert!(parse_range("0-2").is_err());
        assert!(parse_range("a").is_err());
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(
            sidecar(Path::new("out/m.ckpt"), "vocab"),
            PathBuf::from("out/m.ckpt.vocab")
        );
    }
}
