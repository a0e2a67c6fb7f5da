//! Shared fixture for the re-ranking benchmarks.

use lawmatch_core::data::{make_synthetic_corpus, Case, Corpus, SyntheticSpec};
use lawmatch_core::encoder::{deterministic_test_encoder, encode_articles, HashEncoder, SentenceEncoder};
use lawmatch_core::model::Model;
use lawmatch_core::{ModelConfig, Result};

pub const DIM: usize = 32;

pub struct Fixture {
    pub corpus: Corpus,
    pub model: Model,
    pub encoder: HashEncoder,
}

impl Fixture {
    /// Synthetic corpus of `candidates + 1` cases and an untrained model.
    pub fn new(candidates: usize) -> Result<Self> {
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(3, candidates + 1, 8))?;
        let encoder = deterministic_test_encoder(DIM)?;
        let (ids, embs) = encode_articles(&corpus, &encoder)?;
        let model = Model::new(ModelConfig::tiny(DIM), corpus.label_levels, ids, embs, encoder.name())?;
        Ok(Self { corpus, model, encoder })
    }

    pub fn query_and_candidates(&self) -> (&Case, Vec<&Case>) {
        let mut cases = self.corpus.cases.values();
        let query = cases.next().expect("non-empty corpus");
        (query, cases.collect())
    }
}
