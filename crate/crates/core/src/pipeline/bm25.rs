//! First-stage BM25 retrieval over whole case texts.

use std::collections::HashMap;

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    lengths: Vec<usize>,
    avg_len: f64,
    /// term → (document index, term frequency)
    postings: HashMap<String, Vec<(usize, usize)>>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut ids = Vec::new();
        let mut lengths = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (d, (id, text)) in docs.into_iter().enumerate() {
            let lower = text.to_lowercase();
            let tokens = tokenize(&lower);
            let mut tf: HashMap<String, usize> = HashMap::new();
            for tok in &tokens {
                *tf.entry(tok.to_string()).or_default() += 1;
            }
            for (term, n) in tf {
                postings.entry(term).or_default().push((d, n));
            }
            ids.push(id.to_string());
            lengths.push(tokens.len());
        }
        let avg_len = if ids.is_empty() { 0.0 } else { lengths.iter().sum::<usize>() as f64 / ids.len() as f64 };
        Self { ids, lengths, avg_len, postings, k1: DEFAULT_K1, b: DEFAULT_B }
    }

    pub fn with_params(mut self, k1: f64, b: f64) -> Self {
        self.k1 = k1;
        self.b = b;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        let n = self.ids.len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores of every document matching at least one query token. Each
    /// query token occurrence contributes, so repeated terms weigh more.
    pub fn scores(&self, query: &str) -> Result<Vec<(String, f64)>> {
        if self.ids.is_empty() {
            return Err(Error::Empty("BM25 index has no documents".into()));
        }
        let mut acc: HashMap<usize, f64> = HashMap::new();
        let lower = query.to_lowercase();
        for term in tokenize(&lower) {
            let Some(post) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(d, tf) in post {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.lengths[d] as f64 / self.avg_len.max(f64::MIN_POSITIVE);
                *acc.entry(d).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        let mut out: Vec<(String, f64)> = acc.into_iter().map(|(d, s)| (self.ids[d].clone(), s)).collect();
        sort_ranking(&mut out);
        Ok(out)
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<String>> {
        let mut s = self.scores(query)?;
        s.truncate(k);
        Ok(s.into_iter().map(|(id, _)| id).collect())
    }
}

/// Descending score, ties by ascending id.
pub fn sort_ranking(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}
