//! Sentence encoders and the persistent embedding cache.
//!
//! Every encoder maps a batch of sentences to a `[batch × dim]` matrix and is
//! deterministic. Empty (or whitespace-only) sentences encode to the zero
//! vector regardless of the backend.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::config::EncoderConfig;
use crate::data::{Case, Corpus};
use crate::error::{Error, Result};

pub trait SentenceEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Encode a batch; row `i` is the embedding of `batch[i]`.
    fn encode(&self, batch: &[&str]) -> Result<Mat>;
}

impl<E: SentenceEncoder + ?Sized> SentenceEncoder for Box<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        (**self).encode(batch)
    }
}

impl<E: SentenceEncoder + ?Sized> SentenceEncoder for &E {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        (**self).encode(batch)
    }
}

/// Embedding matrix of a case, one row per sentence in order.
pub fn encode_case(case: &Case, enc: &dyn SentenceEncoder) -> Result<Mat> {
    if case.sentences.is_empty() {
        return Err(Error::Empty(format!("case {} has no sentences", case.id)));
    }
    let batch: Vec<&str> = case.sentences.iter().map(String::as_str).collect();
    encode_checked(&batch, enc)
}

/// Article embeddings in ascending id order, with the ids.
pub fn encode_articles(corpus: &Corpus, enc: &dyn SentenceEncoder) -> Result<(Vec<String>, Mat)> {
    if corpus.articles.is_empty() {
        return Err(Error::Empty("article set".into()));
    }
    let ids = corpus.article_ids();
    let texts: Vec<&str> = corpus.articles.values().map(|a| a.text.as_str()).collect();
    Ok((ids, encode_checked(&texts, enc)?))
}

fn encode_checked(batch: &[&str], enc: &dyn SentenceEncoder) -> Result<Mat> {
    let mut out = enc.encode(batch)?;
    if out.dim() != (batch.len(), enc.dim()) {
        return Err(Error::Shape(format!(
            "encoder {} returned {:?} for a batch of {} (dim {})",
            enc.name(),
            out.dim(),
            batch.len(),
            enc.dim()
        )));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.trim().is_empty() {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Deterministic test encoder: signed feature hashing of character 1-, 2- and
/// 3-grams of the lowercased text into `dim` buckets, then L2 normalization.
///
/// Each n-gram is hashed with 64-bit FNV-1a over `seed (8 LE bytes) ‖ n (1 byte) ‖ utf8(gram)`;
/// the bucket is `h mod dim` and the sign is `+1` when bit 63 of `h` is clear.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("hash encoder dimension must be ≥ 2, got {dim}")));
        }
        Ok(Self { dim, seed, name: format!("hash-ngram-d{dim}-s{seed}") })
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut buf = [0u8; 4];
        for n in 1..=3usize {
            if chars.len() < n {
                break;
            }
            for gram in chars.windows(n) {
                let mut h = FNV_OFFSET;
                let mut feed = |bytes: &[u8]| {
                    for b in bytes {
                        h ^= *b as u64;
                        h = h.wrapping_mul(FNV_PRIME);
                    }
                };
                feed(&self.seed.to_le_bytes());
                feed(&[n as u8]);
                for c in gram {
                    feed(c.encode_utf8(&mut buf).as_bytes());
                }
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % self.dim as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Shorthand for [`HashEncoder::new`].
pub fn deterministic_test_encoder(dim: usize) -> Result<HashEncoder> {
    HashEncoder::new(dim, 0)
}

impl SentenceEncoder for HashEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        let mut out = Mat::zeros((batch.len(), self.dim));
        for (i, s) in batch.iter().enumerate() {
            for (j, x) in self.embed(s).into_iter().enumerate() {
                out[[i, j]] = x;
            }
        }
        Ok(out)
    }
}

/// Adapter for embeddings exported from an external pretrained model:
/// a JSONL file of `{"text": str, "vector": [f64]}` records.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct TableRow {
    text: String,
    vector: Vec<f64>,
}

impl TableEncoder {
    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TableRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            match dim {
                None => dim = Some(row.vector.len()),
                Some(d) if d != row.vector.len() => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("vector width {} differs from {d}", row.vector.len()),
                    })
                }
                _ => {}
            }
            table.insert(row.text, row.vector);
        }
        let dim = dim.ok_or_else(|| Error::Empty(format!("embedding table {}", path.display())))?;
        Ok(Self { name: name.into(), dim, table })
    }
}

impl SentenceEncoder for TableEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        let mut out = Mat::zeros((batch.len(), self.dim));
        for (i, s) in batch.iter().enumerate() {
            if s.trim().is_empty() {
                continue;
            }
            let v = self
                .table
                .get(*s)
                .ok_or_else(|| Error::Encoder { index: i, msg: format!("no embedding exported for {s:?}") })?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Ok(out)
    }
}

/// Build the encoder named by a run configuration.
pub fn from_config(cfg: &EncoderConfig, dim: usize) -> Result<Box<dyn SentenceEncoder>> {
    let enc: Box<dyn SentenceEncoder> = match cfg {
        EncoderConfig::Hash { seed } => Box::new(HashEncoder::new(dim, *seed)?),
        EncoderConfig::Table { name, path } => Box::new(TableEncoder::load(name.clone(), path)?),
    };
    if enc.dim() != dim {
        return Err(Error::Config(format!("encoder {} has width {}, model expects d_b = {dim}", enc.name(), enc.dim())));
    }
    Ok(enc)
}

/// Counts `encode` invocations and encoded sentences.
pub struct CountingEncoder<E> {
    inner: E,
    calls: AtomicUsize,
    sentences: AtomicUsize,
}

impl<E: SentenceEncoder> CountingEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicUsize::new(0), sentences: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn sentences(&self) -> usize {
        self.sentences.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.sentences.store(0, Ordering::SeqCst);
    }
}

impl<E: SentenceEncoder> SentenceEncoder for CountingEncoder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.sentences.fetch_add(batch.len(), Ordering::SeqCst);
        self.inner.encode(batch)
    }
}

type CacheKey = (String, [u8; 32]);

const CACHE_MAGIC: &[u8; 8] = b"LMEMB001";

/// Single-file store of `(encoder name, SHA-256 of text) → vector`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<CacheKey, Vec<f64>>>,
}

pub fn text_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or start) the store at `path`.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let mut r = BufReader::new(File::open(path)?);
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)?;
            if &magic != CACHE_MAGIC {
                return Err(Error::Parse { path: path.to_path_buf(), line: 0, msg: "not an embedding cache".into() });
            }
            let n = r.read_u64::<LittleEndian>()?;
            for _ in 0..n {
                let name_len = r.read_u32::<LittleEndian>()? as usize;
                let mut name = vec![0u8; name_len];
                r.read_exact(&mut name)?;
                let name = String::from_utf8(name)
                    .map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, msg: e.to_string() })?;
                let mut digest = [0u8; 32];
                r.read_exact(&mut digest)?;
                let dim = r.read_u32::<LittleEndian>()? as usize;
                let mut v = vec![0.0; dim];
                r.read_f64_into::<LittleEndian>(&mut v)?;
                entries.insert((name, digest), v);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries: Mutex::new(entries) })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, encoder: &str, text: &str) -> Option<Vec<f64>> {
        self.entries.lock().expect("cache lock").get(&(encoder.to_string(), text_digest(text))).cloned()
    }

    pub fn insert(&self, encoder: &str, text: &str, v: Vec<f64>) {
        self.entries.lock().expect("cache lock").insert((encoder.to_string(), text_digest(text)), v);
    }

    /// Persist to the backing file (no-op for in-memory caches).
    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let entries = self.entries.lock().expect("cache lock");
        let mut keys: Vec<&CacheKey> = entries.keys().collect();
        keys.sort();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CACHE_MAGIC)?;
            w.write_u64::<LittleEndian>(keys.len() as u64)?;
            for k in keys {
                let v = &entries[k];
                w.write_u32::<LittleEndian>(k.0.len() as u32)?;
                w.write_all(k.0.as_bytes())?;
                w.write_all(&k.1)?;
                w.write_u32::<LittleEndian>(v.len() as u32)?;
                for x in v {
                    w.write_f64::<LittleEndian>(*x)?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Encoder front that serves repeated texts from an [`EmbeddingCache`].
pub struct CachedEncoder<E> {
    inner: E,
    cache: EmbeddingCache,
}

impl<E: SentenceEncoder> CachedEncoder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: SentenceEncoder> SentenceEncoder for CachedEncoder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, batch: &[&str]) -> Result<Mat> {
        let name = self.inner.name();
        let mut out = Mat::zeros((batch.len(), self.dim()));
        let mut missing = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            match self.cache.get(name, s) {
                Some(v) => out.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice())),
                None => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let texts: Vec<&str> = missing.iter().map(|&i| batch[i]).collect();
            let fresh = self.inner.encode(&texts).map_err(|e| match e {
                Error::Encoder { index, msg } => Error::Encoder { index: missing[index], msg },
                other => other,
            })?;
            for (k, &i) in missing.iter().enumerate() {
                let row = fresh.row(k);
                out.row_mut(i).assign(&row);
                self.cache.insert(name, batch[i], row.to_vec());
            }
        }
        Ok(out)
    }
}
