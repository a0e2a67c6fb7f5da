//! Basic interaction: sentence-level semantic cross-attention between two cases.
//!
//! Correlations are negative Euclidean distances between MLP-mapped sentence
//! embeddings. Each sentence is concatenated with its attention-weighted
//! summary of the other case, contextualized by a shared bidirectional GRU and
//! max-pooled into one vector per case.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BiGru, Mlp};
use crate::params::ParamStore;

/// Shared between the query and candidate sides.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BimParams {
    pub mlp: Mlp,
    pub rnn: BiGru,
}

impl BimParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_b: usize, d_s: usize) -> Self {
        Self { mlp: Mlp::new(store, rng, "bim.mlp", [d_b, d_b, d_b]), rnn: BiGru::new(store, rng, "bim.rnn", 2 * d_b, d_s) }
    }
}

/// `c[i][j] = −‖mx_i − my_j‖₂` on already-mapped rows.
pub fn correlation_from_mapped(t: &Tape, mx: Var, my: Var) -> Result<Var> {
    let (wx, wy) = (t.shape(mx).1, t.shape(my).1);
    if wx != wy {
        return Err(Error::Shape(format!("semantic correlation: widths {wx} and {wy}")));
    }
    Ok(t.scale(t.pair_dist(mx, my), -1.0))
}

/// Semantic correlation matrix `[n_x × n_y]` of two embedding matrices.
pub fn semantic_correlation(t: &Tape, store: &ParamStore, p: &BimParams, x_emb: Var, y_emb: Var) -> Result<Var> {
    let (nx, dx) = t.shape(x_emb);
    let (ny, dy) = t.shape(y_emb);
    if nx == 0 || ny == 0 {
        return Err(Error::Empty("semantic correlation needs at least one sentence per case".into()));
    }
    if dx != dy {
        return Err(Error::Shape(format!("sentence widths {dx} and {dy}")));
    }
    let mx = p.mlp.forward(t, store, x_emb);
    let my = p.mlp.forward(t, store, y_emb);
    correlation_from_mapped(t, mx, my)
}

/// Row-softmax `alpha` and column-softmax `beta` of a correlation matrix.
pub fn interaction_weights(t: &Tape, c: Var) -> (Var, Var) {
    (t.softmax_rows(c), t.softmax_cols(c))
}

/// Matrix-level convenience for [`interaction_weights`].
pub fn interaction_weights_mat(c: &Mat) -> (Mat, Mat) {
    let alpha = crate::autograd::softmax_rows(c);
    let beta = crate::autograd::softmax_rows(&c.t().to_owned()).t().to_owned();
    (alpha, beta)
}

/// Cross-case inputs: `x_i ⊕ Σ_j α_ij y_j` and `y_j ⊕ Σ_i β_ij x_i`.
pub struct CrossInputs {
    pub x: Var,
    pub y: Var,
    pub alpha: Var,
    pub beta: Var,
}

pub fn cross_inputs(t: &Tape, c: Var, x_feats: Var, y_feats: Var) -> CrossInputs {
    let (alpha, beta) = interaction_weights(t, c);
    let x_summary = t.matmul(alpha, y_feats);
    let y_summary = t.matmul(t.transpose(beta), x_feats);
    CrossInputs { x: t.concat_cols(&[x_feats, x_summary]), y: t.concat_cols(&[y_feats, y_summary]), alpha, beta }
}

/// Result of the semantic branch for one pair.
pub struct SemanticOutput {
    pub x_s: Var,
    pub y_s: Var,
    pub correlation: Var,
    pub alpha: Var,
    pub beta: Var,
    pub x_inputs: Var,
    pub y_inputs: Var,
    pub x_hidden: Var,
    pub y_hidden: Var,
}

/// Semantic branch given precomputed MLP-mapped rows.
pub fn encode_mapped(
    t: &Tape,
    store: &ParamStore,
    p: &BimParams,
    x_emb: Var,
    y_emb: Var,
    mx: Var,
    my: Var,
) -> Result<SemanticOutput> {
    let correlation = correlation_from_mapped(t, mx, my)?;
    let cross = cross_inputs(t, correlation, x_emb, y_emb);
    let x_hidden = p.rnn.forward(t, store, cross.x);
    let y_hidden = p.rnn.forward(t, store, cross.y);
    Ok(SemanticOutput {
        x_s: t.col_max(x_hidden),
        y_s: t.col_max(y_hidden),
        correlation,
        alpha: cross.alpha,
        beta: cross.beta,
        x_inputs: cross.x,
        y_inputs: cross.y,
        x_hidden,
        y_hidden,
    })
}

pub fn semantic_interaction_encode(
    t: &Tape,
    store: &ParamStore,
    p: &BimParams,
    x_emb: Var,
    y_emb: Var,
) -> Result<SemanticOutput> {
    if t.shape(x_emb).1 != t.shape(y_emb).1 {
        return Err(Error::Shape("semantic interaction: embedding widths differ".into()));
    }
    let mx = p.mlp.forward(t, store, x_emb);
    let my = p.mlp.forward(t, store, y_emb);
    encode_mapped(t, store, p, x_emb, y_emb, mx, my)
}
