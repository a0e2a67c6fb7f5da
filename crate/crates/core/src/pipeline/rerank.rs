//! Late-interaction re-ranking against precomputed candidate tensors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Case;
use crate::encoder::{encode_case, SentenceEncoder};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::bm25::sort_ranking;
use crate::pipeline::cache::CandidateCache;

/// Rank cached candidates for `query`. The query is encoded once and its
/// side tensors are shared by every candidate.
pub fn rerank(query: &Case, caches: &[CandidateCache], model: &Model, enc: &dyn SentenceEncoder) -> Result<Vec<(String, f64)>> {
    let fp = model.fingerprint();
    if let Some(stale) = caches.iter().find(|c| c.fingerprint != fp) {
        return Err(Error::StaleCache {
            id: stale.candidate_id.clone(),
            expected: fp,
            found: stale.fingerprint.clone(),
        });
    }
    let q = model.side_tensors(&encode_case(query, enc)?)?;
    let scored: Result<Vec<(String, f64)>> =
        caches.par_iter().map(|c| Ok((c.candidate_id.clone(), model.score_sides(&q, &c.side)?))).collect();
    let mut scored = scored?;
    sort_ranking(&mut scored);
    Ok(scored)
}

/// Reference path: every candidate encoded and scored from scratch.
pub fn rerank_online(query: &Case, candidates: &[&Case], model: &Model, enc: &dyn SentenceEncoder) -> Result<Vec<(String, f64)>> {
    let q = encode_case(query, enc)?;
    let mut scored = candidates
        .iter()
        .map(|c| Ok((c.id.clone(), model.score_online(&q, &encode_case(c, enc)?)?)))
        .collect::<Result<Vec<_>>>()?;
    sort_ranking(&mut scored);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
}

/// One line of the ranking JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLine {
    pub query: String,
    pub ranking: Vec<RankedItem>,
}

impl RankingLine {
    pub fn new(query: &str, ranking: Vec<(String, f64)>) -> Self {
        Self { query: query.to_string(), ranking: ranking.into_iter().map(|(id, score)| RankedItem { id, score }).collect() }
    }
}
