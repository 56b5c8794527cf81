//! Vector representations of utterance spans used by the segmenters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 8] = b"TSEG-EMB";
pub const EMB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f32>,
}

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("dense vectors need dim >= 1".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite entry at index {pos}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Sparse bag of raw token counts. Zero counts are never stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TermFrequencyVector {
    counts: BTreeMap<String, u32>,
}

impl TermFrequencyVector {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let mut tf = Self::default();
        tf.add_tokens(tokens);
        tf
    }

    pub fn add_tokens<'a>(&mut self, tokens: impl IntoIterator<Item = &'a String>) {
        for t in tokens {
            *self.counts.entry(t.clone()).or_insert(0) += 1;
        }
    }

    pub fn count(&self, token: &str) -> u32 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<String, u32> {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Elementwise sum of two count vectors.
    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (t, c) in &other.counts {
            *out.counts.entry(t.clone()).or_insert(0) += c;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownTokenPolicy {
    /// Unknown tokens are left out of the mean.
    #[default]
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, DenseVector>,
    pub unknown: UnknownTokenPolicy,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
            unknown: UnknownTokenPolicy::Skip,
        }
    }

    /// Inserts a vector, returning the previous one for the token if any.
    pub fn insert(&mut self, token: impl Into<String>, vector: DenseVector) -> Result<Option<DenseVector>> {
        if vector.dim() != self.dim {
            return Err(Error::Dimension {
                left: self.dim,
                right: vector.dim(),
            });
        }
        Ok(self.vectors.insert(token.into(), vector))
    }

    pub fn get(&self, token: &str) -> Option<&DenseVector> {
        self.vectors.get(token)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Identifies an utterance within a corpus. `index` counts from 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UtteranceKey {
    pub dialogue_id: String,
    pub index: usize,
}

impl UtteranceKey {
    pub fn new(dialogue_id: impl Into<String>, index: usize) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            index,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (id, idx) = s.rsplit_once('#')?;
        Some(Self::new(id, idx.parse().ok()?))
    }
}

impl fmt::Display for UtteranceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.dialogue_id, self.index)
    }
}

/// Per-utterance vectors computed offline.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedStore {
    dim: usize,
    vectors: BTreeMap<UtteranceKey, DenseVector>,
}

impl PrecomputedStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: UtteranceKey, vector: DenseVector) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::Dimension {
                left: self.dim,
                right: vector.dim(),
            });
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &UtteranceKey) -> Option<&DenseVector> {
        self.vectors.get(key)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UtteranceKey, &DenseVector)> {
        self.vectors.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Sparse(TermFrequencyVector),
    Dense(DenseVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub vector: Encoding,
    /// Set when no token (or key) of the input was known to the encoder.
    pub unencodable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// One of the vectors had zero norm; `value` is 0 in that case.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    TermFrequency,
    Embedding(EmbeddingTable),
    Precomputed(PrecomputedStore),
}

impl Encoder {
    pub fn needs_keys(&self) -> bool {
        matches!(self, Encoder::Precomputed(_))
    }

    /// Encodes the concatenation of `utterances`.
    ///
    /// `keys` is required by the precomputed encoder and ignored otherwise. The
    /// precomputed encoder approximates the concatenation by the token-count
    /// weighted mean of the stored utterance vectors.
    pub fn encode(&self, utterances: &[&[String]], keys: Option<&[UtteranceKey]>) -> Result<Encoded> {
        match self {
            Encoder::TermFrequency => {
                let tf = TermFrequencyVector::from_tokens(utterances.iter().flat_map(|u| u.iter()));
                let unencodable = tf.is_empty();
                Ok(Encoded {
                    vector: Encoding::Sparse(tf),
                    unencodable,
                })
            }
            Encoder::Embedding(table) => {
                let mut sum = vec![0f64; table.dim()];
                let mut known = 0usize;
                for token in utterances.iter().flat_map(|u| u.iter()) {
                    if let Some(v) = table.get(token) {
                        for (s, x) in sum.iter_mut().zip(v.values()) {
                            *s += f64::from(*x);
                        }
                        known += 1;
                    }
                }
                Ok(mean_or_zero(sum, known as f64))
            }
            Encoder::Precomputed(store) => {
                let keys =
                    keys.ok_or_else(|| Error::InvalidArgument("precomputed encoder needs utterance keys".into()))?;
                if keys.len() != utterances.len() {
                    return Err(Error::Dimension {
                        left: keys.len(),
                        right: utterances.len(),
                    });
                }
                let mut sum = vec![0f64; store.dim()];
                let mut weight = 0f64;
                for (key, tokens) in keys.iter().zip(utterances) {
                    let Some(v) = store.get(key) else {
                        continue;
                    };
                    let w = tokens.len() as f64;
                    for (s, x) in sum.iter_mut().zip(v.values()) {
                        *s += w * f64::from(*x);
                    }
                    weight += w;
                }
                Ok(mean_or_zero(sum, weight))
            }
        }
    }
}

fn mean_or_zero(sum: Vec<f64>, weight: f64) -> Encoded {
    if weight == 0.0 {
        return Encoded {
            vector: Encoding::Dense(DenseVector::zeros(sum.len())),
            unencodable: true,
        };
    }
    let values = sum.into_iter().map(|s| (s / weight) as f32).collect();
    Encoded {
        vector: Encoding::Dense(DenseVector { values }),
        unencodable: false,
    }
}

pub fn cosine(a: &Encoding, b: &Encoding) -> Result<Similarity> {
    let (dot, na, nb) = match (a, b) {
        (Encoding::Sparse(x), Encoding::Sparse(y)) => {
            // iterate the smaller map for the dot product
            let (small, large) = if x.counts.len() <= y.counts.len() {
                (x, y)
            } else {
                (y, x)
            };
            let dot: f64 = small
                .counts
                .iter()
                .map(|(t, c)| f64::from(*c) * f64::from(large.count(t)))
                .sum();
            (dot, sq_norm_sparse(x), sq_norm_sparse(y))
        }
        (Encoding::Dense(x), Encoding::Dense(y)) => {
            if x.dim() != y.dim() {
                return Err(Error::Dimension {
                    left: x.dim(),
                    right: y.dim(),
                });
            }
            let mut dot = 0f64;
            let mut na = 0f64;
            let mut nb = 0f64;
            for (&p, &q) in x.values.iter().zip(&y.values) {
                let (p, q) = (f64::from(p), f64::from(q));
                dot += p * q;
                na += p * p;
                nb += q * q;
            }
            (dot, na, nb)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "cannot compare a term-frequency vector with a dense vector".into(),
            ))
        }
    };
    if na == 0.0 || nb == 0.0 {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    // symmetric in (a, b): both norms are multiplied before the square root
    let value = (dot / (na * nb).sqrt()).clamp(-1.0, 1.0);
    Ok(Similarity {
        value,
        degenerate: false,
    })
}

fn sq_norm_sparse(v: &TermFrequencyVector) -> f64 {
    v.counts.values().map(|&c| f64::from(c) * f64::from(c)).sum()
}

/// Loads whitespace-separated `token v1 ... vd` lines. The first line fixes `d`.
///
/// A token that appears twice keeps its last vector.
pub fn load_glove_text(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let vector = DenseVector::new(values).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let table = table.get_or_insert_with(|| EmbeddingTable::new(vector.dim()));
        if vector.dim() != table.dim() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} values, found {}", table.dim(), vector.dim()),
            });
        }
        if table.insert(token, vector)?.is_some() {
            log::warn!(
                "{}: duplicate token {token:?} at line {line_no}; keeping the last vector",
                path.display()
            );
        }
    }
    table.ok_or_else(|| Error::Parse {
        line: 0,
        message: "embedding file is empty".into(),
    })
}

/// Little-endian reader that tracks its byte offset for error messages.
pub(crate) struct OffsetReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: start,
            message: format!("truncated {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Reads a TSEG-EMB file.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_precomputed(BufReader::new(file))
}

pub fn read_precomputed(reader: impl Read) -> Result<PrecomputedStore> {
    let mut r = OffsetReader::new(reader);
    let mut magic = [0u8; 8];
    r.exact(&mut magic, "magic")?;
    if &magic != EMB_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected TSEG-EMB".into(),
        });
    }
    let version_at = r.offset;
    let version = r.u32("version")?;
    if version != EMB_VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}"),
        });
    }
    let dim_at = r.offset;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: dim_at,
            message: "dim must be positive".into(),
        });
    }
    let count = r.u64("record count")?;
    let mut store = PrecomputedStore::new(dim);
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        let key_at = r.offset;
        let key_len = r.u16("key length")? as usize;
        let mut key_bytes = vec![0u8; key_len];
        r.exact(&mut key_bytes, "key")?;
        let key = std::str::from_utf8(&key_bytes)
            .ok()
            .and_then(UtteranceKey::parse)
            .ok_or_else(|| Error::Format {
                offset: key_at,
                message: "key is not utf-8 of the form dialogueId#index".into(),
            })?;
        let values_at = r.offset;
        r.exact(&mut buf, "vector")?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: values_at + 4 * pos as u64,
                message: "non-finite float".into(),
            });
        }
        store.insert(key, DenseVector { values })?;
    }
    Ok(store)
}

/// Writes a TSEG-EMB file with records in key order.
pub fn write_precomputed(path: impl AsRef<Path>, store: &PrecomputedStore) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_precomputed_to(&mut out, store).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_precomputed_to(out: &mut impl Write, store: &PrecomputedStore) -> std::io::Result<()> {
    out.write_all(EMB_MAGIC)?;
    out.write_all(&EMB_VERSION.to_le_bytes())?;
    out.write_all(&(store.dim() as u32).to_le_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for (key, vector) in store.iter() {
        let key = key.to_string();
        let len = u16::try_from(key.len())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "key longer than 65535 bytes"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(key.as_bytes())?;
        for v in vector.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}
