//! Training, retrieval, re-ranking and evaluation.

pub mod bm25;
pub mod cache;
pub mod evaluate;
pub mod folds;
pub mod metrics;
pub mod rerank;
pub mod train;

use crate::autograd::Mat;
use crate::config::{EvalConfig, ModelConfig, Task};
use crate::data::{CasePair, Corpus, RankingQuery};
use crate::encoder::{encode_articles, SentenceEncoder};
use crate::error::{Error, Result};
use crate::model::Model;

pub use evaluate::{embed_cases, evaluate_matching, evaluate_ranking, Embeddings};
pub use metrics::{MatchingReport, RankingReport};
pub use train::{pair_objective, query_objective, train, Objective, TrainLog, Units};

/// A corpus with every case and article encoded once.
pub struct Experiment<'a> {
    pub corpus: &'a Corpus,
    pub embeddings: Embeddings,
    pub article_ids: Vec<String>,
    pub article_embs: Mat,
    pub encoder_name: String,
}

impl<'a> Experiment<'a> {
    pub fn new(corpus: &'a Corpus, enc: &dyn SentenceEncoder) -> Result<Self> {
        let (article_ids, article_embs) = encode_articles(corpus, enc)?;
        Ok(Self { corpus, embeddings: embed_cases(corpus, enc)?, article_ids, article_embs, encoder_name: enc.name().to_string() })
    }

    pub fn init_model(&self, cfg: &ModelConfig) -> Result<Model> {
        Model::new(cfg.clone(), self.corpus.label_levels, self.article_ids.clone(), self.article_embs.clone(), self.encoder_name.clone())
    }

    /// Split units (pairs grouped by query, or queries) for one fold.
    pub fn fold_split(&self, task: Task, folds: usize, fold: usize, seed: u64) -> Result<FoldData<'a>> {
        let c = self.corpus;
        match task {
            Task::Lcm => {
                if c.pairs.is_empty() {
                    return Err(Error::Empty("matching needs labeled pairs".into()));
                }
                let groups = folds::group_pairs_by_query(&c.pairs);
                let s = folds::expand(&folds::split(groups.len(), folds, fold, seed)?, &groups);
                let pick = |ix: &[usize]| ix.iter().map(|&i| &c.pairs[i]).collect::<Vec<_>>();
                Ok(FoldData::Pairs { train: pick(&s.train), validation: pick(&s.validation), test: pick(&s.test) })
            }
            Task::Lcr => {
                if c.queries.is_empty() {
                    return Err(Error::Empty("ranking needs graded queries".into()));
                }
                let s = folds::split(c.queries.len(), folds, fold, seed)?;
                let pick = |ix: &[usize]| ix.iter().map(|&i| &c.queries[i]).collect::<Vec<_>>();
                Ok(FoldData::Queries { train: pick(&s.train), validation: pick(&s.validation), test: pick(&s.test) })
            }
        }
    }

    /// Train on one fold and evaluate on its test part.
    pub fn run_fold(&self, task: Task, cfg: &ModelConfig, eval: &EvalConfig, fold: usize) -> Result<FoldOutcome> {
        let data = self.fold_split(task, cfg.folds, fold, cfg.seed)?;
        let model = self.init_model(cfg)?;
        match &data {
            FoldData::Pairs { train: tr, validation, test } => {
                let (model, log) = train(model, self.corpus, &self.embeddings, Units::Pairs(tr), Units::Pairs(validation), eval)?;
                let report = evaluate_matching(&model, test, &self.embeddings, eval)?;
                Ok(FoldOutcome { model, log, ranking: None, matching: Some(report) })
            }
            FoldData::Queries { train: tr, validation, test } => {
                let (model, log) =
                    train(model, self.corpus, &self.embeddings, Units::Queries(tr), Units::Queries(validation), eval)?;
                let report = evaluate_ranking(&model, test, &self.embeddings, eval)?;
                Ok(FoldOutcome { model, log, ranking: Some(report), matching: None })
            }
        }
    }
}

pub enum FoldData<'a> {
    Pairs { train: Vec<&'a CasePair>, validation: Vec<&'a CasePair>, test: Vec<&'a CasePair> },
    Queries { train: Vec<&'a RankingQuery>, validation: Vec<&'a RankingQuery>, test: Vec<&'a RankingQuery> },
}

pub struct FoldOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub ranking: Option<RankingReport>,
    pub matching: Option<MatchingReport>,
}

/// Metric CSV over fold outcomes of one task.
pub fn fold_csv(outcomes: &[FoldOutcome]) -> String {
    let ranking: Vec<RankingReport> = outcomes.iter().filter_map(|o| o.ranking).collect();
    if !ranking.is_empty() {
        return metrics::ranking_csv(&ranking);
    }
    let matching: Vec<MatchingReport> = outcomes.iter().filter_map(|o| o.matching.clone()).collect();
    metrics::matching_csv(&matching)
}
