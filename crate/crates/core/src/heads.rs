//! Final representations and the matching/ranking heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diagnostics::{bump, COUNTERS};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

/// Linear classifier over `X_f ⊕ Y_f ⊕ |X_f − Y_f|`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchHeadParams {
    pub w_p: Linear,
    pub input_width: usize,
    pub levels: usize,
}

impl MatchHeadParams {
    /// `final_width` is the width of one case representation.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, final_width: usize, levels: usize) -> Self {
        Self {
            w_p: Linear::new(store, rng, "head.w_p", 3 * final_width, levels, false),
            input_width: final_width,
            levels,
        }
    }
}

/// Concatenate the representation components present in a variant, in the
/// fixed order semantic, legal, article-intervened.
pub fn final_representation(t: &Tape, parts: &[Option<Var>]) -> Result<Var> {
    let present: Vec<Var> = parts.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Config("variant produces an empty final representation".into()));
    }
    Ok(t.concat_cols(&present))
}

/// Match-level distribution `softmax(W_p (X_f ⊕ Y_f ⊕ |X_f − Y_f|))`, `1 × |Z|`.
pub fn match_classify(t: &Tape, store: &ParamStore, p: &MatchHeadParams, xf: Var, yf: Var) -> Result<Var> {
    let (wx, wy) = (t.shape(xf).1, t.shape(yf).1);
    if wx != p.input_width || wy != p.input_width {
        return Err(Error::Shape(format!("match head expects width {}, got {wx} and {wy}", p.input_width)));
    }
    let features = t.concat_cols(&[xf, yf, t.abs(t.sub(xf, yf))]);
    Ok(t.softmax_rows(p.w_p.forward(t, store, features)))
}

/// Cosine of two final representations as a `1 × 1` node; 0 when either is zero.
pub fn retrieval_score(t: &Tape, xf: Var, yf: Var) -> Var {
    let zero = |v: Var| t.value(v).iter().all(|&x| x == 0.0);
    if zero(xf) || zero(yf) {
        bump(&COUNTERS.zero_norm_cosine, 1);
    }
    t.sum(t.mul(t.normalize_rows(xf), t.normalize_rows(yf)))
}
