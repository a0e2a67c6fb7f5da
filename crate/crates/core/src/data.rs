//! Corpus schema, JSONL ingestion, preprocessing and the synthetic generator.
//!
//! A corpus directory holds `cases.jsonl`, `articles.jsonl` and at least one of
//! `pairs.jsonl` / `queries.jsonl`. An optional `meta.json` records the number
//! of match levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub sentences: Vec<String>,
    pub cited_article_ids: BTreeSet<String>,
    /// Optional per-sentence rationale class in `0..4`.
    pub rationales: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawArticle {
    pub id: String,
    pub text: String,
    pub support_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePair {
    pub query_id: String,
    pub candidate_id: String,
    pub label: usize,
    /// Optional aligned sentence cells `(i, j)`.
    pub alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingQuery {
    pub query_id: String,
    pub candidates: Vec<(String, u32)>,
}

/// Counters for records dropped or repaired while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadDiagnostics {
    pub dangling_citations: usize,
    pub dangling_pairs: usize,
    pub dangling_query_candidates: usize,
    pub empty_queries: usize,
    pub dropped_citations_by_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub cases: BTreeMap<String, Case>,
    pub articles: BTreeMap<String, LawArticle>,
    pub pairs: Vec<CasePair>,
    pub queries: Vec<RankingQuery>,
    pub label_levels: usize,
    pub diagnostics: LoadDiagnostics,
}

/// Known dataset layouts; only the number of match levels differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Lecard,
    LecardV2,
    Elam,
    Ecail,
    Synthetic { levels: usize },
    /// Read the level count from `meta.json`.
    Auto,
}

impl DatasetKind {
    pub fn label_levels(self) -> Option<usize> {
        match self {
            DatasetKind::Lecard | DatasetKind::LecardV2 => Some(4),
            DatasetKind::Elam | DatasetKind::Ecail => Some(3),
            DatasetKind::Synthetic { levels } => Some(levels),
            DatasetKind::Auto => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "lecard" => DatasetKind::Lecard,
            "lecardv2" => DatasetKind::LecardV2,
            "elam" => DatasetKind::Elam,
            "ecail" => DatasetKind::Ecail,
            "auto" => DatasetKind::Auto,
            other => return Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub kind: DatasetKind,
    pub max_sentences: usize,
    pub max_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { kind: DatasetKind::Auto, max_sentences: 15, max_tokens: 150 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    label_levels: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawCase {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentences: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default)]
    articles: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationales: Option<Vec<u8>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawArticle {
    id: String,
    text: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawPair {
    query: String,
    candidate: String,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawCandidate {
    id: String,
    rel: u32,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawQuery {
    query: String,
    candidates: Vec<RawCandidate>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn jsonl_bytes<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Load and validate a corpus directory.
pub fn load_corpus(dir: &Path, opts: LoadOptions) -> Result<Corpus> {
    let file = |name: &str| dir.join(name);
    for required in ["cases.jsonl", "articles.jsonl"] {
        if !file(required).exists() {
            return Err(Error::MissingFile(file(required)));
        }
    }
    let (pairs_path, queries_path) = (file("pairs.jsonl"), file("queries.jsonl"));
    if !pairs_path.exists() && !queries_path.exists() {
        return Err(Error::MissingFile(pairs_path));
    }

    let label_levels = match opts.kind.label_levels() {
        Some(n) => n,
        None => {
            let meta_path = file("meta.json");
            if meta_path.exists() {
                let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
                    .map_err(|e| Error::Parse { path: meta_path.clone(), line: 1, msg: e.to_string() })?;
                meta.label_levels
            } else {
                return Err(Error::Config(format!(
                    "{} has no meta.json; pass an explicit dataset kind",
                    dir.display()
                )));
            }
        }
    };
    if label_levels < 2 {
        return Err(Error::Validation(format!("label_levels must be ≥ 2, got {label_levels}")));
    }

    let raw_cases: Vec<RawCase> = read_jsonl(&file("cases.jsonl"))?;
    if raw_cases.is_empty() {
        return Err(Error::Empty(format!("{} contains no cases", file("cases.jsonl").display())));
    }
    let raw_articles: Vec<RawArticle> = read_jsonl(&file("articles.jsonl"))?;

    let mut diagnostics = LoadDiagnostics::default();
    let mut articles = BTreeMap::new();
    for a in raw_articles {
        if a.text.trim().is_empty() {
            return Err(Error::Validation(format!("article {} has empty text", a.id)));
        }
        let id = a.id.clone();
        if articles.insert(id.clone(), LawArticle { id: a.id, text: a.text, support_count: 0 }).is_some() {
            return Err(Error::Validation(format!("duplicate article id {id}")));
        }
    }

    let mut cases = BTreeMap::new();
    for rc in raw_cases {
        let sentences = match (rc.sentences, rc.text) {
            (Some(s), _) => truncate_sentences(s, opts.max_sentences, opts.max_tokens),
            (None, Some(text)) => split_and_truncate(&text, opts.max_sentences, opts.max_tokens)?,
            (None, None) => {
                return Err(Error::Validation(format!("case {} has neither `sentences` nor `text`", rc.id)))
            }
        };
        if sentences.is_empty() {
            return Err(Error::Validation(format!("case {} has no sentences", rc.id)));
        }
        let rationales = rc.rationales.map(|mut r| {
            r.truncate(sentences.len());
            r
        });
        let mut cited = BTreeSet::new();
        for a in rc.articles {
            if articles.contains_key(&a) {
                cited.insert(a);
            } else {
                diagnostics.dangling_citations += 1;
            }
        }
        let case = Case { id: rc.id.clone(), sentences, cited_article_ids: cited, rationales };
        if cases.insert(rc.id.clone(), case).is_some() {
            return Err(Error::Validation(format!("duplicate case id {}", rc.id)));
        }
    }

    let mut pairs = Vec::new();
    if pairs_path.exists() {
        for p in read_jsonl::<RawPair>(&pairs_path)? {
            if p.label >= label_levels {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) has label {} outside 0..{label_levels}",
                    p.query, p.candidate, p.label
                )));
            }
            if cases.contains_key(&p.query) && cases.contains_key(&p.candidate) {
                pairs.push(CasePair {
                    query_id: p.query,
                    candidate_id: p.candidate,
                    label: p.label,
                    alignment: p.alignment,
                });
            } else {
                diagnostics.dangling_pairs += 1;
            }
        }
    }

    let mut queries = Vec::new();
    if queries_path.exists() {
        for q in read_jsonl::<RawQuery>(&queries_path)? {
            if !cases.contains_key(&q.query) {
                diagnostics.dangling_query_candidates += q.candidates.len();
                diagnostics.empty_queries += 1;
                continue;
            }
            let mut candidates = Vec::with_capacity(q.candidates.len());
            for c in q.candidates {
                if c.rel as usize >= label_levels {
                    return Err(Error::Validation(format!(
                        "query {} candidate {} has grade {} outside 0..{label_levels}",
                        q.query, c.id, c.rel
                    )));
                }
                if cases.contains_key(&c.id) {
                    candidates.push((c.id, c.rel));
                } else {
                    diagnostics.dangling_query_candidates += 1;
                }
            }
            if candidates.is_empty() {
                diagnostics.empty_queries += 1;
            } else {
                queries.push(RankingQuery { query_id: q.query, candidates });
            }
        }
    }

    let mut corpus = Corpus { cases, articles, pairs, queries, label_levels, diagnostics };
    corpus.recount_support();
    Ok(corpus)
}

/// On-disk files of a corpus, in write order.
fn corpus_files(corpus: &Corpus) -> Result<Vec<(&'static str, Vec<u8>)>> {
    Ok(vec![
        (
            "cases.jsonl",
            jsonl_bytes(corpus.cases.values().map(|c| RawCase {
                id: c.id.clone(),
                sentences: Some(c.sentences.clone()),
                text: None,
                articles: c.cited_article_ids.iter().cloned().collect(),
                rationales: c.rationales.clone(),
            }))?,
        ),
        (
            "articles.jsonl",
            jsonl_bytes(corpus.articles.values().map(|a| RawArticle { id: a.id.clone(), text: a.text.clone() }))?,
        ),
        (
            "pairs.jsonl",
            jsonl_bytes(corpus.pairs.iter().map(|p| RawPair {
                query: p.query_id.clone(),
                candidate: p.candidate_id.clone(),
                label: p.label,
                alignment: p.alignment.clone(),
            }))?,
        ),
        (
            "queries.jsonl",
            jsonl_bytes(corpus.queries.iter().map(|q| RawQuery {
                query: q.query_id.clone(),
                candidates: q.candidates.iter().map(|(id, rel)| RawCandidate { id: id.clone(), rel: *rel }).collect(),
            }))?,
        ),
        ("meta.json", serde_json::to_vec_pretty(&Meta { label_levels: corpus.label_levels })?),
    ])
}

/// Write a corpus in the directory layout accepted by [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in corpus_files(corpus)? {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

impl Corpus {
    pub fn recount_support(&mut self) {
        for a in self.articles.values_mut() {
            a.support_count = 0;
        }
        for c in self.cases.values() {
            for id in &c.cited_article_ids {
                if let Some(a) = self.articles.get_mut(id) {
                    a.support_count += 1;
                }
            }
        }
    }

    /// Article ids in the fixed model ordering (ascending id).
    pub fn article_ids(&self) -> Vec<String> {
        self.articles.keys().cloned().collect()
    }

    pub fn case(&self, id: &str) -> Result<&Case> {
        self.cases.get(id).ok_or_else(|| Error::Validation(format!("unknown case id {id}")))
    }

    pub fn stats(&self) -> CorpusStats {
        let n_cases = self.cases.len().max(1) as f64;
        CorpusStats {
            cases: self.cases.len(),
            queries: self.queries.len(),
            avg_candidates_per_query: if self.queries.is_empty() {
                0.0
            } else {
                self.queries.iter().map(|q| q.candidates.len()).sum::<usize>() as f64 / self.queries.len() as f64
            },
            pairs: self.pairs.len(),
            label_levels: self.label_levels,
            articles: self.articles.len(),
            avg_cited_articles: self.cases.values().map(|c| c.cited_article_ids.len()).sum::<usize>() as f64 / n_cases,
            avg_sentences: self.cases.values().map(|c| c.sentences.len()).sum::<usize>() as f64 / n_cases,
        }
    }

    /// SHA-256 over the serialized on-disk form.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, bytes) in corpus_files(self)? {
            h.update(name.as_bytes());
            h.update(bytes);
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Counts mirroring the usual dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub cases: usize,
    pub queries: usize,
    pub avg_candidates_per_query: f64,
    pub pairs: usize,
    pub label_levels: usize,
    pub articles: usize,
    pub avg_cited_articles: f64,
    pub avg_sentences: f64,
}

/// Remove articles cited by fewer than `min_support` cases and the citations to them.
pub fn filter_articles(mut corpus: Corpus, min_support: usize) -> Result<Corpus> {
    corpus.recount_support();
    let removed: BTreeSet<String> = corpus
        .articles
        .values()
        .filter(|a| a.support_count < min_support)
        .map(|a| a.id.clone())
        .collect();
    corpus.articles.retain(|id, _| !removed.contains(id));
    if corpus.articles.is_empty() {
        return Err(Error::Validation(format!(
            "no article is cited by at least {min_support} cases; the article subtask has no labels"
        )));
    }
    for case in corpus.cases.values_mut() {
        let before = case.cited_article_ids.len();
        case.cited_article_ids.retain(|a| !removed.contains(a));
        corpus.diagnostics.dropped_citations_by_filter += before - case.cited_article_ids.len();
    }
    Ok(corpus)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// Byte spans of tokens: every CJK character and every punctuation mark is a
/// token, alphanumeric runs are tokens, whitespace separates.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word_char = c.is_alphanumeric() && !is_cjk(c);
        if word_char {
            run.get_or_insert(i);
            continue;
        }
        if let Some(start) = run.take() {
            spans.push((start, i));
        }
        if !c.is_whitespace() {
            spans.push((i, i + c.len_utf8()));
        }
    }
    if let Some(start) = run {
        spans.push((start, text.len()));
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|(a, b)| &text[a..b]).collect()
}

/// Prefix of `sentence` holding at most `max_tokens` tokens.
pub fn truncate_tokens(sentence: &str, max_tokens: usize) -> &str {
    let spans = token_spans(sentence);
    if spans.len() <= max_tokens {
        return sentence;
    }
    if max_tokens == 0 {
        return "";
    }
    &sentence[..spans[max_tokens - 1].1]
}

fn is_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？' | '.' | '!' | '?')
}

/// Split on terminal punctuation, keep the first `max_sentences` sentences and
/// cut each to `max_tokens` tokens.
pub fn split_and_truncate(raw_text: &str, max_sentences: usize, max_tokens: usize) -> Result<Vec<String>> {
    if raw_text.trim().is_empty() {
        return Err(Error::Empty("document text".into()));
    }
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut iter = raw_text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if is_terminal(c) {
            // absorb runs like "?!" or "。。"
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = iter.peek() {
                if !is_terminal(d) {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
            sentences.push(&raw_text[start..end]);
            start = end;
        }
    }
    sentences.push(&raw_text[start..]);
    let kept: Vec<String> = sentences
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .take(max_sentences)
        .map(|s| truncate_tokens(s, max_tokens).trim_end().to_string())
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("document has no sentences".into()));
    }
    Ok(kept)
}

fn truncate_sentences(sentences: Vec<String>, max_sentences: usize, max_tokens: usize) -> Vec<String> {
    sentences
        .into_iter()
        .take(max_sentences)
        .map(|s| truncate_tokens(&s, max_tokens).to_string())
        .collect()
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_cases: usize,
    pub n_articles: usize,
    /// Overlap thresholds: label = number of thresholds ≤ |shared articles|.
    pub thresholds: Vec<usize>,
    /// Fact phrasings per article; different phrasings share no vocabulary.
    pub phrasings_per_article: usize,
    /// Size of the shared pool of article-independent background sentences.
    pub background_pool: usize,
    pub background_per_case: (usize, usize),
    /// Pairs drawn per case, aiming for one per label level.
    pub pairs_per_case: usize,
    pub n_queries: usize,
    pub candidates_per_query: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64, n_cases: usize, n_articles: usize) -> Self {
        Self {
            seed,
            n_cases,
            n_articles,
            thresholds: vec![1, 2],
            phrasings_per_article: 3,
            background_pool: 12,
            background_per_case: (2, 4),
            pairs_per_case: 3,
            n_queries: (n_cases / 10).max(1),
            candidates_per_query: 20,
        }
    }

    pub fn label_levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn label_for_overlap(&self, overlap: usize) -> usize {
        self.thresholds.iter().filter(|&&t| t <= overlap).count()
    }
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ner", "tas", "vu", "zen", "pol", "ri", "sha", "dem", "gu", "fy", "jor", "quo", "bex",
    "wil", "hon", "cy", "tra", "mu", "dro", "sel", "pa",
];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
}

fn phrase(rng: &mut ChaCha8Rng, words: usize) -> Vec<String> {
    (0..words).map(|_| pseudo_word(rng)).collect()
}

/// Deterministic corpus in which shared applicable articles are the ground-truth match signal.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.n_articles < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 articles".into()));
    }
    if spec.thresholds.is_empty() || spec.thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("thresholds must be strictly increasing, got {:?}", spec.thresholds)));
    }
    if spec.thresholds[0] == 0 {
        return Err(Error::Config("the first threshold must be at least 1".into()));
    }
    let top = *spec.thresholds.last().unwrap();
    if top > spec.n_articles {
        return Err(Error::Config(format!("top threshold {top} exceeds the article count {}", spec.n_articles)));
    }
    if spec.n_cases < 2 {
        return Err(Error::Config("synthetic corpus needs at least 2 cases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Each article: a list of phrasings, each a list of key words.
    let phrasings: Vec<Vec<Vec<String>>> = (0..spec.n_articles)
        .map(|_| (0..spec.phrasings_per_article.max(1)).map(|_| phrase(&mut rng, 4)).collect())
        .collect();
    let background: Vec<String> =
        (0..spec.background_pool.max(1)).map(|_| format!("{}.", phrase(&mut rng, 6).join(" "))).collect();

    let article_id = |k: usize| format!("A{:03}", k + 1);
    let mut articles = BTreeMap::new();
    for (k, ph) in phrasings.iter().enumerate() {
        let keys: Vec<&str> = ph.iter().map(|p| p[0].as_str()).collect();
        let text = format!("Article {} applies to conduct involving {}.", k + 1, keys.join(" or "));
        articles.insert(article_id(k), LawArticle { id: article_id(k), text, support_count: 0 });
    }

    let size_lo = top.max(1);
    let size_hi = (top + 1).min(spec.n_articles);
    let mut cases = BTreeMap::new();
    let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(spec.n_cases);
    for c in 0..spec.n_cases {
        let size = rng.gen_range(size_lo..=size_hi);
        let mut all: Vec<usize> = (0..spec.n_articles).collect();
        all.shuffle(&mut rng);
        let set: BTreeSet<usize> = all.into_iter().take(size).collect();

        let mut sents: Vec<(String, u8)> = Vec::new();
        for &k in &set {
            let p = &phrasings[k][rng.gen_range(0..phrasings[k].len())];
            let mut words: Vec<String> = p.clone();
            words.insert(rng.gen_range(0..=words.len()), pseudo_word(&mut rng));
            sents.push((format!("{}.", words.join(" ")), 1));
        }
        let (b_lo, b_hi) = spec.background_per_case;
        for _ in 0..rng.gen_range(b_lo..=b_hi.max(b_lo)) {
            sents.push((background[rng.gen_range(0..background.len())].clone(), 0));
        }
        sents.shuffle(&mut rng);
        let id = format!("c{c:05}");
        cases.insert(
            id.clone(),
            Case {
                id,
                sentences: sents.iter().map(|(s, _)| s.clone()).collect(),
                cited_article_ids: set.iter().map(|&k| article_id(k)).collect(),
                rationales: Some(sents.iter().map(|(_, r)| *r).collect()),
            },
        );
        sets.push(set);
    }

    let ids: Vec<String> = cases.keys().cloned().collect();
    let overlap = |a: usize, b: usize| sets[a].intersection(&sets[b]).count();
    let levels = spec.label_levels();

    let mut pairs = Vec::new();
    for q in 0..spec.n_cases {
        let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); levels];
        for c in 0..spec.n_cases {
            if c != q {
                by_level[spec.label_for_overlap(overlap(q, c))].push(c);
            }
        }
        for p in 0..spec.pairs_per_case {
            let want = p % levels;
            let pool = if by_level[want].is_empty() {
                by_level.iter().find(|v| !v.is_empty()).expect("at least one other case")
            } else {
                &by_level[want]
            };
            let c = pool[rng.gen_range(0..pool.len())];
            let label = spec.label_for_overlap(overlap(q, c));
            pairs.push(CasePair {
                query_id: ids[q].clone(),
                candidate_id: ids[c].clone(),
                label,
                alignment: Some(alignment_cells(&cases[&ids[q]], &cases[&ids[c]], &phrasings)),
            });
        }
    }

    let mut queries = Vec::new();
    let mut order: Vec<usize> = (0..spec.n_cases).collect();
    order.shuffle(&mut rng);
    for &q in order.iter().take(spec.n_queries.min(spec.n_cases)) {
        let mut others: Vec<usize> = (0..spec.n_cases).filter(|&c| c != q).collect();
        others.shuffle(&mut rng);
        let candidates = others
            .into_iter()
            .take(spec.candidates_per_query)
            .map(|c| (ids[c].clone(), spec.label_for_overlap(overlap(q, c)) as u32))
            .collect();
        queries.push(RankingQuery { query_id: ids[q].clone(), candidates });
    }

    let mut corpus = Corpus {
        cases,
        articles,
        pairs,
        queries,
        label_levels: levels,
        diagnostics: LoadDiagnostics::default(),
    };
    corpus.recount_support();
    Ok(corpus)
}

/// Cells where both sentences state facts of the same article.
fn alignment_cells(x: &Case, y: &Case, phrasings: &[Vec<Vec<String>>]) -> Vec<(usize, usize)> {
    let article_of = |s: &str| -> Option<usize> {
        let words: BTreeSet<&str> = s.trim_end_matches('.').split(' ').collect();
        phrasings.iter().position(|ph| ph.iter().any(|p| p.iter().all(|w| words.contains(w.as_str()))))
    };
    let xa: Vec<Option<usize>> = x.sentences.iter().map(|s| article_of(s)).collect();
    let ya: Vec<Option<usize>> = y.sentences.iter().map(|s| article_of(s)).collect();
    let mut cells = Vec::new();
    for (i, a) in xa.iter().enumerate() {
        for (j, b) in ya.iter().enumerate() {
            if a.is_some() && a == b {
                cells.push((i, j));
            }
        }
    }
    cells
}
