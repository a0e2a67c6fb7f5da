//! Scoring held-out queries and pairs with a model.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::autograd::Mat;
use crate::config::EvalConfig;
use crate::data::{CasePair, Corpus, RankingQuery};
use crate::encoder::{encode_case, SentenceEncoder};
use crate::error::{Error, Result};
use crate::model::{Model, SideTensors};
use crate::pipeline::bm25::sort_ranking;
use crate::pipeline::metrics::{matching_report, ranking_report, MatchingReport, RankingReport};

pub type Embeddings = HashMap<String, Mat>;
pub type Sides = HashMap<String, SideTensors>;

/// Sentence embeddings of every case in the corpus.
pub fn embed_cases(corpus: &Corpus, enc: &dyn SentenceEncoder) -> Result<Embeddings> {
    corpus.cases.par_iter().map(|(id, c)| Ok((id.clone(), encode_case(c, enc)?))).collect()
}

fn lookup<'a, T>(map: &'a HashMap<String, T>, id: &str) -> Result<&'a T> {
    map.get(id).ok_or_else(|| Error::Validation(format!("case {id} has no embedding")))
}

/// Side tensors of the listed cases under the current parameters.
pub fn side_table<'a>(model: &Model, embs: &Embeddings, ids: impl IntoIterator<Item = &'a str>) -> Result<Sides> {
    let ids: BTreeSet<&str> = ids.into_iter().collect();
    ids.into_par_iter().map(|id| Ok((id.to_string(), model.side_tensors(lookup(embs, id)?)?))).collect()
}

pub fn query_case_ids<'a>(queries: &[&'a RankingQuery]) -> Vec<&'a str> {
    queries
        .iter()
        .flat_map(|q| std::iter::once(q.query_id.as_str()).chain(q.candidates.iter().map(|(c, _)| c.as_str())))
        .collect()
}

pub fn pair_case_ids<'a>(pairs: &[&'a CasePair]) -> Vec<&'a str> {
    pairs.iter().flat_map(|p| [p.query_id.as_str(), p.candidate_id.as_str()]).collect()
}

/// Candidate ids ordered by model score with their grades.
pub fn rank_query(model: &Model, q: &RankingQuery, sides: &Sides) -> Result<Vec<(String, f64, u32)>> {
    let qs = lookup(sides, &q.query_id)?;
    let mut scored: Vec<(String, f64)> = q
        .candidates
        .par_iter()
        .map(|(c, _)| Ok((c.clone(), model.score_sides(qs, lookup(sides, c)?)?)))
        .collect::<Result<_>>()?;
    sort_ranking(&mut scored);
    let grades: HashMap<&str, u32> = q.candidates.iter().map(|(c, g)| (c.as_str(), *g)).collect();
    Ok(scored.into_iter().map(|(c, s)| {
        let g = grades[c.as_str()];
        (c, s, g)
    }).collect())
}

/// Binarization threshold: the configured grade, or the top grade.
pub fn relevant_min_grade(eval: &EvalConfig, label_levels: usize) -> u32 {
    eval.relevant_min_grade.unwrap_or(label_levels.saturating_sub(1) as u32)
}

pub fn evaluate_ranking(model: &Model, queries: &[&RankingQuery], embs: &Embeddings, eval: &EvalConfig) -> Result<RankingReport> {
    let sides = side_table(model, embs, query_case_ids(queries))?;
    let rankings = queries
        .iter()
        .map(|q| Ok(rank_query(model, q, &sides)?.into_iter().map(|(_, _, g)| g).collect()))
        .collect::<Result<Vec<Vec<u32>>>>()?;
    Ok(ranking_report(&rankings, relevant_min_grade(eval, model.label_levels), eval.gain))
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict_pairs(model: &Model, pairs: &[&CasePair], sides: &Sides, symmetric: bool) -> Result<Vec<usize>> {
    pairs
        .par_iter()
        .map(|p| {
            let probs = model.classify_sides(lookup(sides, &p.query_id)?, lookup(sides, &p.candidate_id)?, symmetric)?;
            Ok(argmax(&probs))
        })
        .collect()
}

pub fn evaluate_matching(model: &Model, pairs: &[&CasePair], embs: &Embeddings, eval: &EvalConfig) -> Result<MatchingReport> {
    let sides = side_table(model, embs, pair_case_ids(pairs))?;
    let pred = predict_pairs(model, pairs, &sides, eval.symmetric)?;
    let gold: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    Ok(matching_report(&gold, &pred, model.label_levels))
}
