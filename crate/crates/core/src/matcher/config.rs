use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSide {
    Dual,
    SegmentOnly,
    ResponseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fuse {
    Concat,
    Sum,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        "{other:?} is not one of {:?}",
                        Self::NAMES
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

keyword_enum!(MatchSide { Dual => "dual", SegmentOnly => "segment_only", ResponseOnly => "response_only" });
keyword_enum!(Pool { Mean => "mean", Max => "max" });
keyword_enum!(Fuse { Concat => "concat", Sum => "sum" });

/// Shapes, weight mixing and ablation switches of the matching network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatcherConfig {
    /// Segments kept per context (the most recent ones).
    pub max_segments: usize,
    /// Tokens kept per segment and per response.
    pub max_seg_len: usize,
    pub dim: usize,
    /// Feature channels of the word-level matching map.
    pub channels: usize,
    /// Share of the word-level weights when both weightings are on.
    pub alpha: f64,
    /// Context plus response tokens allowed after truncation.
    pub token_budget: usize,
    pub use_word_weights: bool,
    pub use_segment_weights: bool,
    pub use_last_segment_match: bool,
    pub use_multi_turn_match: bool,
    pub match_side: MatchSide,
    pub match_pool: Pool,
    pub match_fuse: Fuse,
    pub aggregate_fuse: Fuse,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            max_segments: 10,
            max_seg_len: 50,
            dim: 16,
            channels: 4,
            alpha: 0.5,
            token_budget: 350,
            use_word_weights: true,
            use_segment_weights: true,
            use_last_segment_match: true,
            use_multi_turn_match: true,
            match_side: MatchSide::Dual,
            match_pool: Pool::Mean,
            match_fuse: Fuse::Concat,
            aggregate_fuse: Fuse::Concat,
        }
    }
}

/// The ablations as `(name, overrides)` pairs accepted by [`MatcherConfig::apply_overrides`].
pub const ABLATIONS: [(&str, &str); 10] = [
    ("w/o word weights", "use_word_weights=false"),
    ("w/o seg. weights", "use_segment_weights=false"),
    ("w/o weights", "use_word_weights=false,use_segment_weights=false"),
    ("w/o last seg. match", "use_last_segment_match=false"),
    ("w/o multi-turn match", "use_multi_turn_match=false"),
    ("single match (seg.)", "match_side=segment_only"),
    ("single match (res.)", "match_side=response_only"),
    ("max-pool (match)", "match_pool=max"),
    ("sum (match)", "match_fuse=sum"),
    ("sum (aggregation)", "aggregate_fuse=sum"),
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::InvalidArgument(format!("{key}: cannot parse {v:?}: {e}")))
}

impl MatcherConfig {
    pub const KEYS: [&'static str; 14] = [
        "max_segments",
        "max_seg_len",
        "dim",
        "channels",
        "alpha",
        "token_budget",
        "use_word_weights",
        "use_segment_weights",
        "use_last_segment_match",
        "use_multi_turn_match",
        "match_side",
        "match_pool",
        "match_fuse",
        "aggregate_fuse",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_segments", self.max_segments),
            ("max_seg_len", self.max_seg_len),
            ("dim", self.dim),
            ("channels", self.channels),
            ("token_budget", self.token_budget),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.use_last_segment_match && !self.use_multi_turn_match {
            return Err(Error::InvalidArgument(
                "at least one of use_last_segment_match and use_multi_turn_match must be true".into(),
            ));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "max_segments" => self.max_segments = parse_num(key, value)?,
            "max_seg_len" => self.max_seg_len = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "token_budget" => self.token_budget = parse_num(key, value)?,
            "use_word_weights" => self.use_word_weights = parse_bool(key, value)?,
            "use_segment_weights" => self.use_segment_weights = parse_bool(key, value)?,
            "use_last_segment_match" => self.use_last_segment_match = parse_bool(key, value)?,
            "use_multi_turn_match" => self.use_multi_turn_match = parse_bool(key, value)?,
            "match_side" => self.match_side = value.parse()?,
            "match_pool" => self.match_pool = value.parse()?,
            "match_fuse" => self.match_fuse = value.parse()?,
            "aggregate_fuse" => self.aggregate_fuse = value.parse()?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown matcher key {other:?}; expected one of {:?}",
                    Self::KEYS
                )))
            }
        }
        Ok(())
    }

    /// Applies comma-separated `key=value` pairs, e.g. `match_pool=max,alpha=0.3`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {pair:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a flat `key=value` file; blank lines and `#` comments are skipped.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let values = [
            self.max_segments.to_string(),
            self.max_seg_len.to_string(),
            self.dim.to_string(),
            self.channels.to_string(),
            self.alpha.to_string(),
            self.token_budget.to_string(),
            self.use_word_weights.to_string(),
            self.use_segment_weights.to_string(),
            self.use_last_segment_match.to_string(),
            self.use_multi_turn_match.to_string(),
            self.match_side.to_string(),
            self.match_pool.to_string(),
            self.match_fuse.to_string(),
            self.aggregate_fuse.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Width of one per-segment matching vector.
    pub fn match_width(&self) -> usize {
        match (self.match_side, self.match_fuse) {
            (MatchSide::Dual, Fuse::Concat) => 2 * self.dim,
            _ => self.dim,
        }
    }

    /// Width of the vector fed to the score head.
    pub fn aggregate_width(&self) -> usize {
        let w = self.match_width();
        match (
            self.use_multi_turn_match && self.use_last_segment_match,
            self.aggregate_fuse,
        ) {
            (true, Fuse::Concat) => 2 * w,
            _ => w,
        }
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = MatcherConfig::default();
        c.validate().unwrap();
        assert_eq!((c.max_segments, c.alpha, c.token_budget), (10, 0.5, 350));
        assert_eq!(c.match_width(), 2 * c.dim);
        assert_eq!(c.aggregate_width(), 4 * c.dim);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = MatcherConfig::default();
        c.apply_overrides("match_pool=max, alpha=0.25,dim=8").unwrap();
        assert_eq!(c.match_pool, Pool::Max);
        let text = c.to_kv_text();
        assert_eq!(MatcherConfig::from_kv_text(&text).unwrap(), c);
        assert_eq!(MatcherConfig::from_kv_text("# comment\n\ndim=4\n").unwrap().dim, 4);
    }

    #[test]
    fn bad_overrides() {
        let mut c = MatcherConfig::default();
        assert!(c.apply_overrides("nope=1").is_err());
        assert!(c.apply_overrides("dim").is_err());
        assert!(c.apply_overrides("match_side=left").is_err());
        assert!(c.apply_overrides("use_word_weights=maybe").is_err());
        assert!(matches!(
            MatcherConfig::from_kv_text("dim=4\nx\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn validation() {
        let mut c = MatcherConfig::default();
        c.use_last_segment_match = false;
        c.use_multi_turn_match = false;
        assert!(c.validate().is_err());
        let c = MatcherConfig {
            alpha: 1.5,
            ..MatcherConfig::default()
        };
        assert!(c.validate().is_err());
        let c = MatcherConfig {
            dim: 0,
            ..MatcherConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn widths_follow_variants() {
        let d = MatcherConfig::default().dim;
        let width = |spec: &str| {
            let mut c = MatcherConfig::default();
            c.apply_overrides(spec).unwrap();
            c.validate().unwrap();
            (c.match_width(), c.aggregate_width())
        };
        assert_eq!(width("match_fuse=sum"), (d, 2 * d));
        assert_eq!(width("match_side=segment_only"), (d, 2 * d));
        assert_eq!(width("aggregate_fuse=sum"), (2 * d, 2 * d));
        assert_eq!(width("use_multi_turn_match=false"), (2 * d, 2 * d));
        for (_, spec) in ABLATIONS {
            width(spec);
        }
    }
}
