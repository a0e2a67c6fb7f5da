//! Mini-batch AdamW training with per-epoch validation and best-checkpoint
//! selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::config::EvalConfig;
use crate::data::{Case, CasePair, Corpus, RankingQuery};
use crate::error::{Error, Result};
use crate::heads::retrieval_score;
use crate::losses;
use crate::model::{CaseSide, Model};
use crate::params::{AdamW, AdamWConfig, ParamId};
use crate::pipeline::evaluate::{evaluate_matching, evaluate_ranking, Embeddings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub article_loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Macro-F1 (matching) or MAP (ranking) on the validation part.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
}

/// Training units for one task.
#[derive(Debug, Clone, Copy)]
pub enum Units<'a> {
    Pairs(&'a [&'a CasePair]),
    Queries(&'a [&'a RankingQuery]),
}

impl Units<'_> {
    fn len(&self) -> usize {
        match self {
            Units::Pairs(p) => p.len(),
            Units::Queries(q) => q.len(),
        }
    }
}

struct ItemLoss {
    article: f64,
    main: f64,
    aux: f64,
    grads: Vec<(ParamId, Mat)>,
}

/// Loss terms of one training unit on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    /// Mean article loss over the cases in the unit.
    pub article: Option<Var>,
    pub main: Var,
    /// Sum of the enabled auxiliary losses.
    pub aux: Option<Var>,
    pub total: Var,
}

/// A case with its sentence embeddings.
pub type Side<'a> = (&'a Case, &'a Mat);

fn article_loss(t: &Tape, model: &Model, side: &CaseSide, case: &Case) -> Result<Option<Var>> {
    match side.cosines {
        Some(cos) => Ok(Some(losses::zlpr(t, cos, &model.article_labels(case), model.config.loss.tau_a)?)),
        None => Ok(None),
    }
}

fn rationale_loss(t: &Tape, model: &Model, side: &CaseSide, case: &Case) -> Result<Option<Var>> {
    let (Some(head), Some(dist)) = (&model.rationale, side.dist) else { return Ok(None) };
    let probs = head.probabilities(t, &model.store, dist.values);
    Ok(Some(losses::rationale(t, probs, case.rationales.as_deref())?))
}

fn mean(t: &Tape, parts: &[Var]) -> Option<Var> {
    (!parts.is_empty()).then(|| t.scale(t.sum(t.concat_cols(parts)), 1.0 / parts.len() as f64))
}

fn combine(t: &Tape, article: Option<Var>, main: Var, aux: &[Var]) -> Objective {
    let aux = (!aux.is_empty()).then(|| t.sum(t.concat_cols(aux)));
    let mut total = losses::total(t, &article.into_iter().collect::<Vec<_>>(), main);
    if let Some(a) = aux {
        total = t.add(total, a);
    }
    Objective { article, main, aux, total }
}

fn gold_sets(model: &Model, x: &Case, y: &Case) -> Option<(Vec<usize>, Vec<usize>)> {
    model.config.teacher_forcing.then(|| (model.article_indices(x), model.article_indices(y)))
}

/// Matching objective of one labeled pair.
pub fn pair_objective(t: &Tape, model: &Model, pair: &CasePair, x: Side<'_>, y: Side<'_>) -> Result<Objective> {
    let protos = model.prototypes(t);
    let xs = model.case_side(t, x.1, protos)?;
    let ys = model.case_side(t, y.1, protos)?;
    let gold = gold_sets(model, x.0, y.0);
    let out = model.forward_pair(t, &xs, &ys, gold.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())))?;
    let main = losses::cross_entropy(t, model.match_probs(t, &out)?, pair.label)?;

    let mut art = Vec::new();
    art.extend(article_loss(t, model, &xs, x.0)?);
    art.extend(article_loss(t, model, &ys, y.0)?);
    let mut aux = Vec::new();
    aux.extend(rationale_loss(t, model, &xs, x.0)?);
    aux.extend(rationale_loss(t, model, &ys, y.0)?);
    if model.config.loss.enable_align {
        if let Some(c_l) = out.c_l {
            let (nx, ny) = t.shape(c_l);
            let a = losses::alignment_matrix(pair.alignment.as_deref().unwrap_or(&[]), nx, ny);
            aux.push(losses::alignment_kl(t, &a, c_l)?);
        }
    }
    Ok(combine(t, mean(t, &art), main, &aux))
}

/// Ranking objective of one query over its graded candidates.
pub fn query_objective(t: &Tape, model: &Model, query: Side<'_>, candidates: &[(Side<'_>, u32)]) -> Result<Objective> {
    let protos = model.prototypes(t);
    let qs = model.case_side(t, query.1, protos)?;
    let mut art = Vec::new();
    art.extend(article_loss(t, model, &qs, query.0)?);
    let mut aux = Vec::new();
    aux.extend(rationale_loss(t, model, &qs, query.0)?);
    let mut scores = Vec::with_capacity(candidates.len());
    for (c, _) in candidates {
        let cs = model.case_side(t, c.1, protos)?;
        let gold = gold_sets(model, query.0, c.0);
        let out = model.forward_pair(t, &qs, &cs, gold.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())))?;
        scores.push(retrieval_score(t, out.xf, out.yf));
        art.extend(article_loss(t, model, &cs, c.0)?);
        aux.extend(rationale_loss(t, model, &cs, c.0)?);
    }
    let levels: Vec<usize> = candidates.iter().map(|(_, g)| *g as usize).collect();
    let main = losses::cosent(t, t.concat_cols(&scores), &levels, model.config.loss.tau_m)?;
    Ok(combine(t, mean(t, &art), main, &aux))
}

struct Ctx<'a> {
    model: &'a Model,
    corpus: &'a Corpus,
    embs: &'a Embeddings,
}

impl<'a> Ctx<'a> {
    fn side(&self, id: &str) -> Result<Side<'a>> {
        let emb = self.embs.get(id).ok_or_else(|| Error::Validation(format!("case {id} has no embedding")))?;
        Ok((self.corpus.case(id)?, emb))
    }

    fn finish(t: &Tape, o: Objective) -> ItemLoss {
        let grads = t.backward(o.total);
        ItemLoss {
            article: o.article.map_or(0.0, |a| t.scalar(a)),
            main: t.scalar(o.main),
            aux: o.aux.map_or(0.0, |a| t.scalar(a)),
            grads: t.param_grads(&grads),
        }
    }

    fn pair_loss(&self, pair: &CasePair) -> Result<ItemLoss> {
        let t = Tape::new();
        let o = pair_objective(&t, self.model, pair, self.side(&pair.query_id)?, self.side(&pair.candidate_id)?)?;
        Ok(Self::finish(&t, o))
    }

    fn query_loss(&self, q: &RankingQuery) -> Result<ItemLoss> {
        let t = Tape::new();
        let cands = q.candidates.iter().map(|(c, g)| Ok((self.side(c)?, *g))).collect::<Result<Vec<_>>>()?;
        let o = query_objective(&t, self.model, self.side(&q.query_id)?, &cands)?;
        Ok(Self::finish(&t, o))
    }
}

fn check_article_labels(model: &Model, corpus: &Corpus, units: Units<'_>) -> Result<()> {
    if !model.variant().has_lim() {
        return Ok(());
    }
    let ids: Vec<&str> = match units {
        Units::Pairs(p) => p.iter().flat_map(|p| [p.query_id.as_str(), p.candidate_id.as_str()]).collect(),
        Units::Queries(q) => q.iter().map(|q| q.query_id.as_str()).collect(),
    };
    let labeled = ids.iter().filter_map(|id| corpus.case(id).ok()).any(|c| !model.article_indices(c).is_empty());
    if labeled || ids.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation("no training case cites a retained law article; the article subtask has no labels".into()))
    }
}

fn validate(model: &Model, embs: &Embeddings, val: Units<'_>, eval: &EvalConfig) -> Result<Option<f64>> {
    if val.len() == 0 {
        return Ok(None);
    }
    Ok(Some(match val {
        Units::Pairs(p) => evaluate_matching(model, p, embs, eval)?.macro_f1,
        Units::Queries(q) => evaluate_ranking(model, q, embs, eval)?.map,
    }))
}

/// Train `model` on `train`, selecting the epoch with the best validation
/// score (the last epoch when there is no validation data).
pub fn train(
    mut model: Model,
    corpus: &Corpus,
    embs: &Embeddings,
    train: Units<'_>,
    validation: Units<'_>,
    eval: &EvalConfig,
) -> Result<(Model, TrainLog)> {
    let cfg = model.config.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    check_article_labels(&model, corpus, train)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::with_lr(cfg.learning_rate) }, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_7A1E);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochLog { epoch, ..Default::default() };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = Ctx { model: &model, corpus, embs };
            let items: Vec<ItemLoss> = batch
                .par_iter()
                .map(|&i| match train {
                    Units::Pairs(p) => ctx.pair_loss(p[i]),
                    Units::Queries(q) => ctx.query_loss(q[i]),
                })
                .collect::<Result<_>>()?;
            let n = items.len() as f64;
            let (mut art, mut main, mut aux) = (0.0, 0.0, 0.0);
            let mut grads: Vec<(ParamId, Mat)> = Vec::new();
            for it in items {
                art += it.article / n;
                main += it.main / n;
                aux += it.aux / n;
                for (id, g) in it.grads {
                    match grads.iter_mut().find(|(k, _)| *k == id) {
                        Some((_, acc)) => acc.scaled_add(1.0 / n, &g),
                        None => grads.push((id, g / n)),
                    }
                }
            }
            let total = art + main + aux;
            if !total.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("article {art}, main {main}, auxiliary {aux}"),
                });
            }
            opt.step(&mut model.store, &grads);
            let w = n / train.len() as f64;
            sums.article_loss += art * w;
            sums.main_loss += main * w;
            sums.aux_loss += aux * w;
            sums.loss += total * w;
        }
        sums.validation = validate(&model, embs, validation, eval)?;
        log::info!(
            "epoch {epoch}: loss {:.5} (article {:.5}, main {:.5}, aux {:.5}) validation {:?}",
            sums.loss,
            sums.article_loss,
            sums.main_loss,
            sums.aux_loss,
            sums.validation
        );
        if let Some(v) = sums.validation {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.clone()));
                log.best_epoch = Some(epoch);
                log.best_validation = Some(v);
            }
        }
        log.epochs.push(sums);
    }
    match best {
        Some((_, m)) => Ok((m, log)),
        None => {
            log.best_epoch = cfg.epochs.checked_sub(1);
            Ok((model, log))
        }
    }
}
