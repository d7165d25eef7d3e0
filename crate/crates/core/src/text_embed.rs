//! Pre-trained text vectors for feature names and categorical values, and
//! the continuous-value fill.
//!
//! The biomedical text encoder runs out of process. Its outputs arrive
//! through an embedding cache file:
//!
//! ```text
//! "EHRV1" | count: u32 | dim: u32 | count × ( key_len: u32 | key: utf-8 | dim × f32 )
//! ```
//!
//! All integers and floats are little-endian. A deterministic hash-seeded
//! stub stands in when no cache is available.

use std::borrow::Cow;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Special, Token, TokenValue};

pub const CACHE_MAGIC: &[u8; 5] = b"EHRV1";
pub const DEFAULT_PRE_DIM: usize = 768;

/// One pre-trained vector.
pub type PretrainedVector = Vec<f32>;

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    FileCache {
        dim: usize,
        table: HashMap<String, PretrainedVector>,
        /// Used for texts absent from the table; `None` makes them a
        /// `CacheMiss`.
        fallback_seed: Option<u64>,
    },
    Stub {
        dim: usize,
        seed: u64,
    },
}

impl EmbeddingProvider {
    pub fn stub(dim: usize, seed: u64) -> Self {
        EmbeddingProvider::Stub { dim, seed }
    }

    pub fn from_table(dim: usize, table: HashMap<String, PretrainedVector>) -> Result<Self> {
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::FormatError(format!(
                "vector for {k:?} has {} entries, expected {dim}",
                v.len()
            )));
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::FormatError(format!("vector for {k:?} is not finite")));
        }
        Ok(EmbeddingProvider::FileCache {
            dim,
            table,
            fallback_seed: None,
        })
    }

    pub fn open_cache(path: impl AsRef<Path>) -> Result<Self> {
        let (dim, table) = read_cache(path)?;
        Self::from_table(dim, table)
    }

    /// Lets a file cache fall back to the stub for missing texts.
    pub fn with_fallback(self, seed: u64) -> Self {
        match self {
            EmbeddingProvider::FileCache { dim, table, .. } => EmbeddingProvider::FileCache {
                dim,
                table,
                fallback_seed: Some(seed),
            },
            stub => stub,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::FileCache { dim, .. } | EmbeddingProvider::Stub { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EmbeddingProvider::FileCache { .. } => "file_cache",
            EmbeddingProvider::Stub { .. } => "deterministic_stub",
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<PretrainedVector> {
        if text.is_empty() {
            return Err(Error::InvalidConfig("cannot embed empty text".into()));
        }
        match self {
            EmbeddingProvider::Stub { dim, seed } => Ok(stub_vector(text, *dim, *seed)),
            EmbeddingProvider::FileCache {
                dim,
                table,
                fallback_seed,
            } => match (table.get(text), fallback_seed) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(seed)) => Ok(stub_vector(text, *dim, *seed)),
                (None, None) => Err(Error::CacheMiss(text.to_string())),
            },
        }
    }
}

/// Read-only text → vector lookup used while building model inputs.
pub trait PreEmbed: Sync {
    fn dim(&self) -> usize;
    fn vector(&self, text: &str) -> Result<Cow<'_, [f32]>>;
}

impl PreEmbed for EmbeddingProvider {
    fn dim(&self) -> usize {
        EmbeddingProvider::dim(self)
    }

    fn vector(&self, text: &str) -> Result<Cow<'_, [f32]>> {
        match self {
            EmbeddingProvider::FileCache { table, .. } => match table.get(text) {
                Some(v) => Ok(Cow::Borrowed(v.as_slice())),
                None => self.embed_text(text).map(Cow::Owned),
            },
            EmbeddingProvider::Stub { .. } => self.embed_text(text).map(Cow::Owned),
        }
    }
}

/// Provider with vectors memoized for a known set of texts (typically the
/// vocabularies); other texts go to the provider on every call.
#[derive(Debug, Clone)]
pub struct PreEmbedCache {
    provider: EmbeddingProvider,
    memo: HashMap<String, PretrainedVector>,
}

impl PreEmbedCache {
    pub fn new<'a>(provider: EmbeddingProvider, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut memo = HashMap::new();
        for t in texts {
            if !memo.contains_key(t) {
                memo.insert(t.to_string(), provider.embed_text(t)?);
            }
        }
        Ok(PreEmbedCache { provider, memo })
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }
}

impl PreEmbed for PreEmbedCache {
    fn dim(&self) -> usize {
        self.provider.dim()
    }

    fn vector(&self, text: &str) -> Result<Cow<'_, [f32]>> {
        match self.memo.get(text) {
            Some(v) => Ok(Cow::Borrowed(v.as_slice())),
            None => self.provider.vector(text),
        }
    }
}

/// Unit-norm vector derived from SHA-256 of `seed || text`, expanded with a
/// ChaCha stream of standard normals.
fn stub_vector(text: &str, dim: usize, seed: u64) -> PretrainedVector {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    raw.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Repeats a continuous value across all `dim` entries.
pub fn fill(x: f64, dim: usize) -> Result<PretrainedVector> {
    if !x.is_finite() {
        return Err(Error::NonFiniteValue(x));
    }
    Ok(vec![x as f32; dim])
}

/// Pre-embedding of a token's value slot.
#[derive(Debug, Clone, PartialEq)]
pub enum PreEmbedding {
    Vector(PretrainedVector),
    /// Learned special vector owned by the embedder; the provider is not
    /// consulted.
    Learned(Special),
}

pub fn value_pre_embedding(token: &Token, provider: &EmbeddingProvider) -> Result<PreEmbedding> {
    match &token.value {
        TokenValue::Number(x) => fill(*x, provider.dim()).map(PreEmbedding::Vector),
        TokenValue::Category(c) => provider.embed_text(c).map(PreEmbedding::Vector),
        TokenValue::Special(s) => Ok(PreEmbedding::Learned(*s)),
    }
}

pub fn feature_pre_embedding(token: &Token, provider: &EmbeddingProvider) -> Result<PreEmbedding> {
    match Special::from_text(&token.feature_text) {
        Some(s) => Ok(PreEmbedding::Learned(s)),
        None => provider.embed_text(&token.feature_text).map(PreEmbedding::Vector),
    }
}

pub fn encode_cache<'a>(
    dim: usize,
    entries: impl IntoIterator<Item = (&'a str, &'a [f32])>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (key, v) in entries {
        if v.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "vector for {key:?} has {} entries, expected {dim}",
                v.len()
            )));
        }
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::FormatError(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<(usize, HashMap<String, PretrainedVector>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
        return Err(Error::FormatError("bad magic, expected EHRV1".into()));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut table = HashMap::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::FormatError(format!("key is not UTF-8: {e}")))?
            .to_string();
        let raw = r.take(dim.checked_mul(4).ok_or_else(|| Error::FormatError("dim overflow".into()))?)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if table.insert(key.clone(), v).is_some() {
            return Err(Error::FormatError(format!("duplicate key {key:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::FormatError(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((dim, table))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<(usize, HashMap<String, PretrainedVector>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

/// Writes a cache file with keys in sorted order, atomically.
pub fn write_cache(
    path: impl AsRef<Path>,
    dim: usize,
    table: &HashMap<String, PretrainedVector>,
) -> Result<()> {
    let mut keys: Vec<&String> = table.keys().collect();
    keys.sort();
    let bytes = encode_cache(dim, keys.into_iter().map(|k| (k.as_str(), table[k].as_slice())))?;
    crate::io_util::write_atomic(path, |f| f.write_all(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_unit_norm() {
        let p = EmbeddingProvider::stub(768, 7);
        let a = p.embed_text("heart rate").unwrap();
        let b = p.embed_text("heart rate").unwrap();
        assert_eq!(a, b);
        for text in ["heart rate", "labevents: creatinine", "positive", "x"] {
            let v = p.embed_text(text).unwrap();
            let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "{text}: {norm}");
        }
        assert_ne!(a, p.embed_text("heart rate ").unwrap());
        assert_ne!(a, EmbeddingProvider::stub(768, 8).embed_text("heart rate").unwrap());
    }

    #[test]
    fn cache_miss_and_fallback() {
        let mut table = HashMap::new();
        table.insert("a".to_string(), vec![1.0f32, 0.0]);
        let p = EmbeddingProvider::from_table(2, table).unwrap();
        assert_eq!(p.embed_text("a").unwrap(), vec![1.0, 0.0]);
        match p.embed_text("b") {
            Err(Error::CacheMiss(t)) => assert_eq!(t, "b"),
            other => panic!("{other:?}"),
        }
        let p = p.with_fallback(3);
        assert_eq!(p.embed_text("b").unwrap().len(), 2);
    }

    #[test]
    fn fill_cases() {
        assert_eq!(fill(0.0, 768).unwrap(), vec![0.0; 768]);
        assert_eq!(fill(2.5, 4).unwrap(), vec![2.5, 2.5, 2.5, 2.5]);
        assert!(matches!(fill(f64::NAN, 768), Err(Error::NonFiniteValue(_))));
        assert!(matches!(fill(f64::INFINITY, 3), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn value_slot_dispatch() {
        let p = EmbeddingProvider::stub(8, 1);
        let mut t = Token {
            feature_text: "labevents: culture".into(),
            value: TokenValue::Number(1.2),
            tau_minutes: 0,
            delta_minutes: 0,
            is_continuous: true,
            is_static: false,
        };
        assert_eq!(
            value_pre_embedding(&t, &p).unwrap(),
            PreEmbedding::Vector(fill(1.2, 8).unwrap())
        );
        t.value = TokenValue::Category("positive".into());
        t.is_continuous = false;
        assert_eq!(
            value_pre_embedding(&t, &p).unwrap(),
            PreEmbedding::Vector(p.embed_text("positive").unwrap())
        );
        // a file cache with no entries proves the provider is never asked
        let empty = EmbeddingProvider::from_table(8, HashMap::new()).unwrap();
        assert_eq!(
            value_pre_embedding(&Token::cls(), &empty).unwrap(),
            PreEmbedding::Learned(Special::Cls)
        );
        assert_eq!(
            feature_pre_embedding(&Token::cls(), &empty).unwrap(),
            PreEmbedding::Learned(Special::Cls)
        );
    }

    #[test]
    fn corrupted_cache_rejected() {
        let bytes = encode_cache(2, [("a", &[1.0f32, 2.0][..])]).unwrap();
        assert_eq!(decode_cache(&bytes).unwrap().1["a"], vec![1.0, 2.0]);
        for cut in [0, 3, 9, 13, 15, bytes.len() - 1] {
            assert!(matches!(decode_cache(&bytes[..cut]), Err(Error::FormatError(_))), "{cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cache(&bad), Err(Error::FormatError(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_cache(&long), Err(Error::FormatError(_))));
    }
}
