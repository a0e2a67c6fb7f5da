//! Training objectives.
//!
//! Each loss is written once against the [`Tape`] so training and gradient
//! checks share one implementation; the plain `f64` entry points build a
//! throwaway tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{row, Mat, Tape, Var};
use crate::diagnostics::{bump, COUNTERS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

pub const RATIONALE_CLASSES: usize = 4;
const PROB_FLOOR: f64 = 1e-12;

/// `log(1 + Σ exp(terms))` with the implicit zero logit; `0` for no terms.
fn log1p_sum_exp(t: &Tape, terms: Var) -> Var {
    if t.shape(terms).1 == 0 {
        return t.zeros(1, 1);
    }
    let with_zero = t.concat_cols(&[t.zeros(1, 1), terms]);
    t.log_sum_exp(with_zero)
}

/// ZLPR multi-label loss on a `1 × n_L` row of cosines.
///
/// With `s = τ·scores`: `log(1 + Σ_pos e^{−s_k}) + log(1 + Σ_neg e^{s_k})`.
pub fn zlpr(t: &Tape, scores: Var, labels: &[bool], tau: f64) -> Result<Var> {
    let n = t.shape(scores).1;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} article scores", labels.len())));
    }
    let s = t.scale(scores, tau);
    let pos: Vec<(usize, usize)> = (0..n).filter(|&k| labels[k]).map(|k| (0, k)).collect();
    let neg: Vec<(usize, usize)> = (0..n).filter(|&k| !labels[k]).map(|k| (0, k)).collect();
    let pos_term = log1p_sum_exp(t, t.scale(t.gather(s, &pos), -1.0));
    let neg_term = log1p_sum_exp(t, t.gather(s, &neg));
    Ok(t.add(pos_term, neg_term))
}

/// CoSENT ranking loss over a `1 × n` row of pair scores.
///
/// `log(1 + Σ_{level(h) > level(l)} e^{τ(score_l − score_h)})`.
pub fn cosent(t: &Tape, scores: Var, levels: &[usize], tau: f64) -> Result<Var> {
    let n = t.shape(scores).1;
    if levels.len() != n {
        return Err(Error::Shape(format!("{} levels for {n} scores", levels.len())));
    }
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for h in 0..n {
        for l in 0..n {
            if levels[h] > levels[l] {
                hi.push((0, h));
                lo.push((0, l));
            }
        }
    }
    if hi.is_empty() {
        return Ok(t.zeros(1, 1));
    }
    let diffs = t.sub(t.gather(scores, &lo), t.gather(scores, &hi));
    Ok(log1p_sum_exp(t, t.scale(diffs, tau)))
}

/// `−log max(p[gold], 1e-12)` for a `1 × |Z|` distribution.
pub fn cross_entropy(t: &Tape, probs: Var, gold: usize) -> Result<Var> {
    let n = t.shape(probs).1;
    if gold >= n {
        return Err(Error::Validation(format!("gold class {gold} outside 0..{n}")));
    }
    let p = t.clamp_min(t.gather(probs, &[(0, gold)]), PROB_FLOOR);
    Ok(t.scale(t.ln(p), -1.0))
}

/// Per-sentence rationale classifier on value vectors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RationaleHead {
    pub linear: Linear,
}

impl RationaleHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_h: usize) -> Self {
        Self { linear: Linear::new(store, rng, "rationale", d_h, RATIONALE_CLASSES, true) }
    }

    pub fn probabilities(&self, t: &Tape, store: &ParamStore, values: Var) -> Var {
        t.softmax_rows(self.linear.forward(t, store, values))
    }
}

/// Summed cross-entropy of per-sentence rationale distributions `[n × 4]`.
/// `None` labels contribute 0 and are counted.
pub fn rationale(t: &Tape, probs: Var, gold: Option<&[u8]>) -> Result<Var> {
    let Some(gold) = gold else {
        bump(&COUNTERS.missing_rationales, 1);
        return Ok(t.zeros(1, 1));
    };
    let (n, classes) = t.shape(probs);
    if gold.len() != n {
        return Err(Error::Shape(format!("{} rationale labels for {n} sentences", gold.len())));
    }
    if let Some(bad) = gold.iter().find(|&&g| g as usize >= classes) {
        return Err(Error::Validation(format!("rationale label {bad} outside 0..{classes}")));
    }
    let idx: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &g)| (i, g as usize)).collect();
    let picked = t.clamp_min(t.gather(probs, &idx), PROB_FLOOR);
    Ok(t.scale(t.sum(t.ln(picked)), -1.0))
}

/// `KL(a' ‖ c')` with `a' = A / ΣA` and `c' = softmax over all cells of C^(L)`.
pub fn alignment_kl(t: &Tape, alignment: &Mat, c_l: Var) -> Result<Var> {
    if alignment.dim() != t.shape(c_l) {
        return Err(Error::Shape(format!(
            "alignment {:?} vs legal correlation {:?}",
            alignment.dim(),
            t.shape(c_l)
        )));
    }
    if alignment.iter().any(|&a| a != 0.0 && a != 1.0) {
        return Err(Error::Validation("alignment matrix must be binary".into()));
    }
    let total = alignment.sum();
    if total == 0.0 {
        bump(&COUNTERS.empty_alignment, 1);
        return Ok(t.zeros(1, 1));
    }
    let a = alignment / total;
    // Σ a' log a' is constant; Σ a' log c' = Σ a' c − LSE(c) since Σ a' = 1.
    let entropy: f64 = a.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let weighted = t.sum(t.mul(c_l, t.leaf(a)));
    let lse = t.log_sum_exp(c_l);
    Ok(t.add_scalar(t.sub(lse, weighted), entropy))
}

/// Binary alignment matrix from aligned cells.
pub fn alignment_matrix(cells: &[(usize, usize)], nx: usize, ny: usize) -> Mat {
    let mut a = Mat::zeros((nx, ny));
    for &(i, j) in cells {
        if i < nx && j < ny {
            a[[i, j]] = 1.0;
        }
    }
    a
}

/// `𝓛 = 𝓛_a + 𝓛_m` with `𝓛_a` the mean of the per-case article losses.
pub fn total(t: &Tape, article_losses: &[Var], main: Var) -> Var {
    if article_losses.is_empty() {
        return main;
    }
    let sum = t.sum(t.concat_cols(article_losses));
    t.add(t.scale(sum, 1.0 / article_losses.len() as f64), main)
}

/// Evaluate a loss of one row input and return its value and gradient.
pub fn value_and_grad(input: &[f64], f: impl Fn(&Tape, Var) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    let t = Tape::new();
    let x = t.leaf(row(input));
    let out = f(&t, x)?;
    let grads = t.backward(out);
    let g = grads.wrt(x).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; input.len()]);
    Ok((t.scalar(out), g))
}

pub fn zlpr_loss(scores: &[f64], labels: &[bool], tau: f64) -> Result<f64> {
    value_and_grad(scores, |t, s| zlpr(t, s, labels, tau)).map(|(v, _)| v)
}

pub fn cosent_loss(scores: &[f64], levels: &[usize], tau: f64) -> Result<f64> {
    value_and_grad(scores, |t, s| cosent(t, s, levels, tau)).map(|(v, _)| v)
}

pub fn ce_loss(pred: &[f64], gold: usize) -> Result<f64> {
    value_and_grad(pred, |t, p| cross_entropy(t, p, gold)).map(|(v, _)| v)
}

pub fn total_loss(article_losses: &[f64], main_loss: f64) -> f64 {
    if article_losses.is_empty() {
        return main_loss;
    }
    article_losses.iter().sum::<f64>() / article_losses.len() as f64 + main_loss
}

pub fn alignment_kl_loss(alignment: &Mat, c_l: &Mat) -> Result<f64> {
    let t = Tape::new();
    let c = t.leaf(c_l.clone());
    let out = alignment_kl(&t, alignment, c)?;
    Ok(t.scalar(out))
}

pub fn rationale_loss(probs: &Mat, gold: Option<&[u8]>) -> Result<f64> {
    let t = Tape::new();
    let p = t.leaf(probs.clone());
    let out = rationale(&t, p, gold)?;
    Ok(t.scalar(out))
}
