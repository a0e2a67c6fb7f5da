//! Legal interaction: article-aware attention, the prototype article
//! classifier, law-distribution correlation, legal interaction encoding and
//! article-intervened attention (AIA).
//!
//! Every law article owns a learnable memory vector that queries the
//! context-encoded sentences of a case. The raw attention scores `λ[i][k]`
//! double as each sentence's law-distribution vector, whose cosine across two
//! cases defines their legal correlation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::diagnostics::{bump, COUNTERS};
use crate::error::{Error, Result};
use crate::nn::{BiGru, Linear};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArticleAttentionParams {
    /// `[n_L × d_b]`, one memory vector per article.
    pub memories: ParamId,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LimParams {
    /// Pre-attention context encoder, `d_b → d_b`.
    pub context_rnn: BiGru,
    pub attention: ArticleAttentionParams,
    /// Prototype map `d_b → d_h`.
    pub prototype: Linear,
    /// Legal interaction encoder, `2·d_h → d_l`.
    pub legal_rnn: BiGru,
    /// `d_l → d_h`
    pub w_h: Linear,
    /// `d_b → d_h`
    pub w_phi: Linear,
}

impl LimParams {
    /// Memory vectors start at the encoded article embeddings.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        article_embs: &Mat,
        d_b: usize,
        d_h: usize,
        d_l: usize,
    ) -> Self {
        assert_eq!(article_embs.ncols(), d_b, "article embedding width must equal d_b");
        let context_rnn = BiGru::new(store, rng, "lim.context_rnn", d_b, d_b);
        let memories = store.insert("lim.memories", article_embs.clone());
        let attention = ArticleAttentionParams {
            memories,
            w_q: Linear::new(store, rng, "lim.w_q", d_b, d_h, false),
            w_k: Linear::new(store, rng, "lim.w_k", d_b, d_h, false),
            w_v: Linear::new(store, rng, "lim.w_v", d_b, d_h, false),
        };
        Self {
            context_rnn,
            attention,
            prototype: Linear::new(store, rng, "lim.prototype", d_b, d_h, true),
            legal_rnn: BiGru::new(store, rng, "lim.legal_rnn", 2 * d_h, d_l),
            w_h: Linear::new(store, rng, "lim.w_h", d_l, d_h, false),
            w_phi: Linear::new(store, rng, "lim.w_phi", d_b, d_h, false),
        }
    }
}

/// Article-aware attention outputs for one case.
#[derive(Debug, Clone, Copy)]
pub struct ArticleDistribution {
    /// Raw scores `λ`, `[n × n_L]`.
    pub lambda: Var,
    /// Column-softmax of `λ` over sentences.
    pub gamma: Var,
    /// Value vectors, `[n × d_h]`.
    pub values: Var,
    /// Per-article representations `Σ_i γ[i][k] v_i`, `[n_L × d_h]`.
    pub reps: Var,
}

/// `λ[i][k] = (W_q m_k)ᵀ (W_k h_i)`, unscaled.
pub fn article_attention(t: &Tape, store: &ParamStore, p: &ArticleAttentionParams, h: Var) -> Result<ArticleDistribution> {
    if t.shape(h).0 == 0 {
        return Err(Error::Empty("article attention over zero sentences".into()));
    }
    let memories = t.param(store, p.memories);
    let queries = p.w_q.forward(t, store, memories);
    let keys = p.w_k.forward(t, store, h);
    let values = p.w_v.forward(t, store, h);
    let lambda = t.matmul(keys, t.transpose(queries));
    Ok(distribution_from(t, lambda, values))
}

/// Rebuild `γ` and the per-article representations from stored `λ` and values.
pub fn distribution_from(t: &Tape, lambda: Var, values: Var) -> ArticleDistribution {
    let gamma = t.softmax_cols(lambda);
    let reps = t.matmul(t.transpose(gamma), values);
    ArticleDistribution { lambda, gamma, values, reps }
}

/// Prototype of every article: `[n_L × d_h]`.
pub fn prototypes(t: &Tape, store: &ParamStore, p: &LimParams, article_embs: Var) -> Var {
    p.prototype.forward(t, store, article_embs)
}

fn count_zero_rows(m: &Mat) -> usize {
    m.rows().into_iter().filter(|r| r.iter().all(|&x| x == 0.0)).count()
}

/// `cos(X_k, Proto_k)` for every article as a `1 × n_L` row; zero-norm operands give 0.
pub fn article_cosines(t: &Tape, reps: Var, protos: Var) -> Result<Var> {
    if t.shape(reps) != t.shape(protos) {
        return Err(Error::Shape(format!(
            "article representations {:?} vs prototypes {:?}",
            t.shape(reps),
            t.shape(protos)
        )));
    }
    bump(&COUNTERS.zero_norm_cosine, count_zero_rows(&t.value(reps)) + count_zero_rows(&t.value(protos)));
    let prod = t.mul(t.normalize_rows(reps), t.normalize_rows(protos));
    Ok(t.transpose(t.row_sums(prod)))
}

/// `P(L_k | X) = sigmoid(cos(X_k, Proto_k))`.
pub fn article_probabilities(t: &Tape, reps: Var, protos: Var) -> Result<Var> {
    Ok(t.sigmoid(article_cosines(t, reps, protos)?))
}

/// Indices of articles with probability strictly above `threshold`.
pub fn predict_article_set(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs.iter().enumerate().filter(|(_, &p)| p > threshold).map(|(k, _)| k).collect()
}

/// Article ids (in model order) whose probability exceeds `threshold`.
pub fn predict_article_ids(probs: &[f64], article_ids: &[String], threshold: f64) -> Vec<String> {
    predict_article_set(probs, threshold).into_iter().map(|k| article_ids[k].clone()).collect()
}

/// `c[i][j] = cos(λ_i^X, λ_j^Y)`; zero rows give 0.
pub fn legal_correlation(t: &Tape, lambda_x: Var, lambda_y: Var) -> Result<Var> {
    let (kx, ky) = (t.shape(lambda_x).1, t.shape(lambda_y).1);
    if kx != ky {
        return Err(Error::Shape(format!("law distributions over {kx} and {ky} articles")));
    }
    bump(&COUNTERS.zero_norm_cosine, count_zero_rows(&t.value(lambda_x)) + count_zero_rows(&t.value(lambda_y)));
    let nx = t.normalize_rows(lambda_x);
    let ny = t.normalize_rows(lambda_y);
    Ok(t.matmul(nx, t.transpose(ny)))
}

pub struct LegalOutput {
    pub x_l: Var,
    pub y_l: Var,
    pub alpha: Var,
    pub beta: Var,
    pub x_hidden: Var,
    pub y_hidden: Var,
}

/// Legal interaction over value vectors weighted by the legal correlation.
pub fn legal_interaction_encode(
    t: &Tape,
    store: &ParamStore,
    p: &LimParams,
    values_x: Var,
    values_y: Var,
    c_l: Var,
) -> Result<LegalOutput> {
    let (nx, ny) = (t.shape(values_x).0, t.shape(values_y).0);
    if t.shape(c_l) != (nx, ny) {
        return Err(Error::Shape(format!("legal correlation {:?} for {nx}×{ny} sentences", t.shape(c_l))));
    }
    if t.shape(values_x).1 != t.shape(values_y).1 {
        return Err(Error::Shape("value widths differ".into()));
    }
    let cross = crate::bim::cross_inputs(t, c_l, values_x, values_y);
    let x_hidden = p.legal_rnn.forward(t, store, cross.x);
    let y_hidden = p.legal_rnn.forward(t, store, cross.y);
    Ok(LegalOutput {
        x_l: t.col_max(x_hidden),
        y_l: t.col_max(y_hidden),
        alpha: cross.alpha,
        beta: cross.beta,
        x_hidden,
        y_hidden,
    })
}

/// Mean embedding of the predicted articles, or of all articles when none is predicted.
pub fn article_context(predicted: &[usize], article_embs: &Mat) -> Mat {
    let rows: Vec<usize> = if predicted.is_empty() {
        bump(&COUNTERS.empty_predicted_articles, 1);
        (0..article_embs.nrows()).collect()
    } else {
        predicted.to_vec()
    };
    let mut phi = Mat::zeros((1, article_embs.ncols()));
    for &k in &rows {
        phi += &article_embs.row(k);
    }
    phi / rows.len() as f64
}

pub struct AiaOutput {
    /// `1 × d_l`
    pub x_a: Var,
    /// Attention over sentences, `1 × n`.
    pub psi: Var,
}

/// `ψ = softmax_i((W_h h_i)ᵀ (W_Φ Φ))`, output `Σ_i ψ_i h_i`.
pub fn article_intervened_attention(
    t: &Tape,
    store: &ParamStore,
    p: &LimParams,
    h_l: Var,
    predicted: &[usize],
    article_embs: &Mat,
) -> Result<AiaOutput> {
    if t.shape(h_l).0 == 0 {
        return Err(Error::Empty("article-intervened attention over zero sentences".into()));
    }
    let phi = t.leaf(article_context(predicted, article_embs));
    let ctx = p.w_phi.forward(t, store, phi);
    let keys = p.w_h.forward(t, store, h_l);
    let logits = t.transpose(t.matmul(keys, t.transpose(ctx)));
    let psi = t.softmax_rows(logits);
    Ok(AiaOutput { x_a: t.matmul(psi, h_l), psi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn setup(d_b: usize, d_h: usize, n_l: usize, seed: u64) -> (ParamStore, LimParams, Mat) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embs = Mat::from_shape_fn((n_l, d_b), |_| rng.gen_range(-1.0..1.0));
        let p = LimParams::new(&mut store, &mut rng, &embs, d_b, d_h, 2 * d_h);
        (store, p, embs)
    }

    /// Double-loop evaluation of the attention scores and per-article sums.
    fn loop_oracle(h: &Mat, mem: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> (Mat, Mat) {
        let (n, n_l, d_h) = (h.nrows(), mem.nrows(), wq.ncols());
        let proj = |x: ndarray::ArrayView1<f64>, w: &Mat| -> Vec<f64> {
            (0..w.ncols()).map(|c| (0..x.len()).map(|r| x[r] * w[[r, c]]).sum()).collect()
        };
        let mut lambda = Mat::zeros((n, n_l));
        for i in 0..n {
            for k in 0..n_l {
                let q = proj(mem.row(k), wq);
                let key = proj(h.row(i), wk);
                lambda[[i, k]] = q.iter().zip(&key).map(|(a, b)| a * b).sum();
            }
        }
        let mut reps = Mat::zeros((n_l, d_h));
        for k in 0..n_l {
            let max = (0..n).map(|i| lambda[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|i| (lambda[[i, k]] - max).exp()).sum();
            for i in 0..n {
                let g = (lambda[[i, k]] - max).exp() / z;
                let v = proj(h.row(i), wv);
                for c in 0..d_h {
                    reps[[k, c]] += g * v[c];
                }
            }
        }
        (lambda, reps)
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let (store, p, _) = setup(4, 3, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Mat::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let t = Tape::new();
        let hv = t.leaf(h.clone());
        let dist = article_attention(&t, &store, &p.attention, hv).unwrap();
        let (lambda, reps) = loop_oracle(
            &h,
            store.get(p.attention.memories),
            store.get(p.attention.w_q.weight),
            store.get(p.attention.w_k.weight),
            store.get(p.attention.w_v.weight),
        );
        assert!((&*t.value(dist.lambda) - &lambda).iter().all(|d| d.abs() < 1e-12));
        assert!((&*t.value(dist.reps) - &reps).iter().all(|d| d.abs() < 1e-12));
        for col in t.value(dist.gamma).columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sentence_reps_equal_the_value_row() {
        let (store, p, _) = setup(4, 3, 5, 2);
        let t = Tape::new();
        let h = t.leaf(array![[0.3, -0.1, 0.7, 0.2]]);
        let dist = article_attention(&t, &store, &p.attention, h).unwrap();
        let reps = t.value(dist.reps);
        let v = t.value(dist.values);
        for k in 0..5 {
            assert_eq!(reps.row(k), v.row(0));
        }
        assert!(t.value(dist.gamma).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn constant_scores_average_values() {
        let t = Tape::new();
        let lambda = t.leaf(Mat::from_elem((3, 2), 0.7));
        let values = t.leaf(array![[1.0, 0.0], [0.0, 3.0], [2.0, 3.0]]);
        let dist = distribution_from(&t, lambda, values);
        let reps = t.value(dist.reps);
        assert!((reps[[0, 0]] - 1.0).abs() < 1e-12 && (reps[[1, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sentences_is_an_error() {
        let (store, p, _) = setup(4, 3, 2, 0);
        let t = Tape::new();
        let h = t.leaf(Mat::zeros((0, 4)));
        assert!(article_attention(&t, &store, &p.attention, h).is_err());
    }

    #[test]
    fn probability_examples() {
        let t = Tape::new();
        let reps = t.leaf(array![[1.0, 0.0], [2.0, 1.0], [-2.0, -1.0], [0.0, 0.0]]);
        let protos = t.leaf(array![[0.0, 5.0], [2.0, 1.0], [2.0, 1.0], [1.0, 1.0]]);
        let probs = t.to_vec(article_probabilities(&t, reps, protos).unwrap());
        assert_eq!(probs[0], 0.5);
        assert!((probs[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((probs[2] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(probs[3], 0.5);
    }

    #[test]
    fn article_set_uses_strict_threshold() {
        assert_eq!(predict_article_set(&[0.6, 0.4], 0.5), vec![0]);
        assert_eq!(predict_article_set(&[0.5, 0.5000001], 0.5), vec![1]);
        assert!(predict_article_set(&[0.1, 0.49], 0.5).is_empty());
        let ids = vec!["a".to_string(), "b".to_string()];
        assert_eq!(predict_article_ids(&[0.9, 0.2], &ids, 0.5), vec!["a"]);
    }

    #[test]
    fn legal_correlation_examples() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        let y = t.leaf(array![[2.0, 4.0, 0.0], [1.0, 2.0, 0.0]]);
        let c = legal_correlation(&t, x, y).unwrap();
        let c = t.value(c).clone();
        assert!((c[[0, 0]] - 1.0).abs() < 1e-12 && (c[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(c[[1, 0]], 0.0);
        assert_eq!(c[[2, 1]], 0.0);
        let bad = t.leaf(Mat::zeros((1, 4)));
        assert!(legal_correlation(&t, x, bad).is_err());
    }

    #[test]
    fn legal_interaction_with_one_candidate_sentence() {
        let (store, p, _) = setup(4, 3, 2, 8);
        let t = Tape::new();
        let vx = t.leaf(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let vy = t.leaf(array![[0.5, 0.25, -1.0]]);
        let c = t.leaf(array![[0.3], [-0.9]]);
        let out = legal_interaction_encode(&t, &store, &p, vx, vy, c).unwrap();
        assert_eq!(t.shape(out.x_l), (1, 6));
        let alpha = t.value(out.alpha);
        assert!(alpha.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn aia_context_and_fallback() {
        let embs = array![[1.0, 0.0], [0.0, 2.0], [3.0, 4.0]];
        assert_eq!(article_context(&[1], &embs), array![[0.0, 2.0]]);
        assert_eq!(article_context(&[], &embs), array![[4.0 / 3.0, 2.0]]);

        let (store, p, embs) = setup(4, 3, 3, 4);
        let t = Tape::new();
        let h = t.leaf(Mat::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * 0.1));
        let empty = article_intervened_attention(&t, &store, &p, h, &[], &embs).unwrap();
        let all = article_intervened_attention(&t, &store, &p, h, &[0, 1, 2], &embs).unwrap();
        assert!(t.value(empty.x_a).iter().all(|x| x.is_finite()));
        assert_eq!(*t.value(empty.x_a), *t.value(all.x_a));
        assert!((t.value(empty.psi).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aia_uniform_logits_give_the_mean() {
        let (mut store, p, embs) = setup(4, 3, 2, 4);
        store.get_mut(p.w_h.weight).fill(0.0);
        let t = Tape::new();
        let hm = array![[1.0, 2.0, 0.0, 0.0, 1.0, 1.0], [3.0, 0.0, 0.0, 2.0, 1.0, 1.0]];
        let h = t.leaf(hm.clone());
        let out = article_intervened_attention(&t, &store, &p, h, &[0], &embs).unwrap();
        let mean = hm.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(t.value(out.x_a).row(0).iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
