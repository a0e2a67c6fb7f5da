//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero on failure.
//!
//! `LAWMATCH_LECARD_DIR` (and optionally `LAWMATCH_LECARD_CONFIG`) enables the
//! real-corpus retrieval run.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use lawmatch_core::autograd::{Mat, Tape};
use lawmatch_core::bim::{semantic_interaction_encode, BimParams};
use lawmatch_core::data::{
    load_corpus, make_synthetic_corpus, split_and_truncate, tokenize, Case, CasePair, LoadOptions, SyntheticSpec,
};
use lawmatch_core::encoder::{
    deterministic_test_encoder, encode_articles, from_config, CachedEncoder, CountingEncoder, EmbeddingCache,
    SentenceEncoder,
};
use lawmatch_core::heads::{match_classify, retrieval_score, MatchHeadParams};
use lawmatch_core::lim::{
    article_attention, article_intervened_attention, article_probabilities, legal_correlation, predict_article_set,
    LimParams,
};
use lawmatch_core::losses::{
    alignment_kl_loss, ce_loss, cosent, cosent_loss, cross_entropy, rationale_loss, value_and_grad, zlpr,
    zlpr_loss,
};
use lawmatch_core::model::Model;
use lawmatch_core::params::ParamStore;
use lawmatch_core::pipeline::bm25::Bm25Index;
use lawmatch_core::pipeline::cache::{precompute_all, CandidateCache};
use lawmatch_core::pipeline::metrics::{average_precision, ndcg_at_k, precision_at_k, ranking_report, CUTOFFS};
use lawmatch_core::pipeline::rerank::{rerank, rerank_online};
use lawmatch_core::pipeline::{fold_csv, pair_objective, query_objective, Experiment};
use lawmatch_core::verification::{
    brute_force_ap, brute_force_attention, brute_force_map, brute_force_ndcg, brute_force_precision,
    finite_difference_check, GradCheckReport,
};
use lawmatch_core::{EvalConfig, ModelConfig, RunConfig, Task, Variant};
use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

const FIXTURES: u64 = 100;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    m.select(Axis(0), perm)
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn store_rng(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::default(), ChaCha8Rng::seed_from_u64(seed))
}

// ---------------------------------------------------------------- invariants

fn bim_softmax_and_range(seed: u64) -> Check {
    let (mut store, mut rng) = store_rng(seed);
    let d = 2 * rng.gen_range(1..4);
    let p = BimParams::new(&mut store, &mut rng, d, 2 * d);
    let (nx, ny) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let x = rand_mat(&mut rng, nx, d);
    let y = rand_mat(&mut rng, ny, d);
    let t = Tape::new();
    let out = semantic_interaction_encode(&t, &store, &p, t.leaf(x.clone()), t.leaf(y)).map_err(|e| e.to_string())?;
    let alpha = t.value(out.alpha).clone();
    let beta = t.value(out.beta).clone();
    for r in alpha.sum_axis(Axis(1)).iter().chain(beta.sum_axis(Axis(0)).iter()) {
        ensure((r - 1.0).abs() < 1e-6, || format!("attention weights sum to {r}"))?;
    }
    let c = t.value(out.correlation).clone();
    ensure(c.iter().all(|&v| v <= 0.0), || "positive semantic correlation".into())?;
    let t2 = Tape::new();
    let self_out = semantic_interaction_encode(&t2, &store, &p, t2.leaf(x.clone()), t2.leaf(x)).map_err(|e| e.to_string())?;
    let cs = t2.value(self_out.correlation).clone();
    for i in 0..nx {
        ensure(cs[[i, i]] == 0.0, || format!("self correlation {} at {i}", cs[[i, i]]))?;
    }
    Ok(())
}

fn bim_permutation_invariance_and_pooling(seed: u64) -> Check {
    let (mut store, mut rng) = store_rng(seed);
    let d = 2 * rng.gen_range(1..4);
    let p = BimParams::new(&mut store, &mut rng, d, 2 * d);
    let (nx, ny) = (rng.gen_range(1..7), rng.gen_range(2..7));
    let x = rand_mat(&mut rng, nx, d);
    let y = rand_mat(&mut rng, ny, d);
    let perm = permutation(&mut rng, ny);
    let t = Tape::new();
    let a = semantic_interaction_encode(&t, &store, &p, t.leaf(x.clone()), t.leaf(y.clone())).unwrap();
    let b = semantic_interaction_encode(&t, &store, &p, t.leaf(x), t.leaf(permute_rows(&y, &perm))).unwrap();
    let diff = max_abs_diff(&t.value(a.x_inputs), &t.value(b.x_inputs));
    ensure(diff < 1e-12, || format!("query-side cross inputs moved by {diff} under a candidate permutation"))?;
    let hidden = t.value(a.x_hidden).clone();
    let pooled = t.value(a.x_s).clone();
    for c in 0..hidden.ncols() {
        let m = hidden.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure(pooled[[0, c]] == m, || format!("pooled coordinate {c} is not the column maximum"))?;
    }
    Ok(())
}

fn random_lim(seed: u64) -> (ParamStore, LimParams, ChaCha8Rng, Mat, usize) {
    let (mut store, mut rng) = store_rng(seed);
    let d = 2 * rng.gen_range(1..4);
    let n_l = rng.gen_range(1..7);
    let embs = rand_mat(&mut rng, n_l, d);
    let p = LimParams::new(&mut store, &mut rng, &embs, d, d, 2 * d);
    (store, p, rng, embs, d)
}

fn lim_softmax_sums(seed: u64) -> Check {
    let (store, p, mut rng, embs, d) = random_lim(seed);
    let n = rng.gen_range(1..9);
    let t = Tape::new();
    let dist = article_attention(&t, &store, &p.attention, t.leaf(rand_mat(&mut rng, n, d))).unwrap();
    for s in t.value(dist.gamma).sum_axis(Axis(0)).iter() {
        ensure((s - 1.0).abs() < 1e-6, || format!("gamma column sums to {s}"))?;
    }
    let k = embs.nrows();
    let predicted: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.5)).collect();
    let aia = article_intervened_attention(&t, &store, &p, t.leaf(rand_mat(&mut rng, n, 2 * d)), &predicted, &embs).unwrap();
    let total: f64 = t.value(aia.psi).sum();
    ensure((total - 1.0).abs() < 1e-6, || format!("psi sums to {total}"))
}

fn lim_permutation_equivariance(seed: u64) -> Check {
    let (store, p, mut rng, _, d) = random_lim(seed);
    let (nx, ny) = (rng.gen_range(2..9), rng.gen_range(1..9));
    let hx = rand_mat(&mut rng, nx, d);
    let hy = rand_mat(&mut rng, ny, d);
    let perm = permutation(&mut rng, nx);
    let t = Tape::new();
    let a = article_attention(&t, &store, &p.attention, t.leaf(hx.clone())).unwrap();
    let b = article_attention(&t, &store, &p.attention, t.leaf(permute_rows(&hx, &perm))).unwrap();
    let diff = max_abs_diff(&permute_rows(&t.value(a.lambda), &perm), &t.value(b.lambda));
    ensure(diff < 1e-12, || format!("lambda rows not permuted, diff {diff}"))?;
    let y = article_attention(&t, &store, &p.attention, t.leaf(hy)).unwrap();
    let ca = legal_correlation(&t, a.lambda, y.lambda).unwrap();
    let cb = legal_correlation(&t, b.lambda, y.lambda).unwrap();
    let diff = max_abs_diff(&permute_rows(&t.value(ca), &perm), &t.value(cb));
    ensure(diff < 1e-12, || format!("legal correlation rows not permuted, diff {diff}"))
}

fn lim_correlation_range_and_scale(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..7);
    let (nx, ny) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let lx = rand_mat(&mut rng, nx, k);
    let ly = rand_mat(&mut rng, ny, k);
    let a: f64 = rng.gen_range(0.01..100.0);
    let t = Tape::new();
    let c = legal_correlation(&t, t.leaf(lx.clone()), t.leaf(ly)).unwrap();
    ensure(t.value(c).iter().all(|v| (-1.0..=1.0).contains(v)), || "legal correlation outside [-1, 1]".into())?;
    let c = legal_correlation(&t, t.leaf(lx.clone()), t.leaf(&lx * a)).unwrap();
    let c = t.value(c);
    for i in 0..nx {
        ensure((c[[i, i]] - 1.0).abs() < 1e-12, || format!("c(λ, aλ) = {} for a = {a}", c[[i, i]]))?;
    }
    Ok(())
}

fn article_probability_range(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let t = Tape::new();
    let p = article_probabilities(&t, t.leaf(rand_mat(&mut rng, k, d)), t.leaf(rand_mat(&mut rng, k, d))).unwrap();
    let inside = t.value(p).iter().all(|&v| v > 0.0 && v < 1.0);
    ensure(inside, || "article probability outside (0, 1)".into())
}

fn predicted_set_monotone(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..9);
    let mut probs: Vec<f64> = (0..k).map(|_| rng.gen()).collect();
    let before: BTreeSet<usize> = predict_article_set(&probs, 0.5).into_iter().collect();
    let i = rng.gen_range(0..k);
    probs[i] = rng.gen_range(probs[i]..=1.0);
    let after: BTreeSet<usize> = predict_article_set(&probs, 0.5).into_iter().collect();
    ensure(before.is_subset(&after), || format!("raising p[{i}] removed articles: {before:?} -> {after:?}"))
}

fn heads_distribution_and_score(seed: u64) -> Check {
    let (mut store, mut rng) = store_rng(seed);
    let (w, levels) = (rng.gen_range(1..9), rng.gen_range(2..5));
    let head = MatchHeadParams::new(&mut store, &mut rng, w, levels);
    let xf = rand_mat(&mut rng, 1, w);
    let yf = rand_mat(&mut rng, 1, w);
    let t = Tape::new();
    let probs = match_classify(&t, &store, &head, t.leaf(xf.clone()), t.leaf(yf.clone())).unwrap();
    let probs = t.value(probs).clone();
    ensure(probs.iter().all(|&p| p >= 0.0) && (probs.sum() - 1.0).abs() < 1e-6, || format!("not a distribution: {probs}"))?;
    let score = |a: &Mat, b: &Mat| t.scalar(retrieval_score(&t, t.leaf(a.clone()), t.leaf(b.clone())));
    let a: f64 = rng.gen_range(0.01..100.0);
    let s = score(&xf, &yf);
    ensure((s - score(&yf, &xf)).abs() < 1e-12, || "retrieval score is not symmetric".into())?;
    ensure((s - score(&(&xf * a), &yf)).abs() < 1e-12, || format!("retrieval score changes under scaling by {a}"))?;
    let cands: Vec<Mat> = (0..10).map(|_| rand_mat(&mut rng, 1, w)).collect();
    let order = |q: &Mat| {
        let mut ix: Vec<(usize, f64)> = cands.iter().map(|c| score(q, c)).enumerate().collect();
        ix.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        ix.into_iter().map(|(i, _)| i).collect::<Vec<_>>()
    };
    ensure(order(&xf) == order(&(&xf * a)), || "candidate order changes under query scaling".into())
}

fn zlpr_monotone(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..9);
    let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.4)).collect();
    let base = zlpr_loss(&scores, &labels, 10.0).unwrap();
    ensure(base.is_finite() && base >= 0.0, || format!("zlpr loss {base}"))?;
    let i = rng.gen_range(0..k);
    let mut up = scores.clone();
    up[i] += rng.gen_range(0.01..0.5);
    let moved = zlpr_loss(&up, &labels, 10.0).unwrap();
    if labels[i] {
        ensure(moved < base, || format!("raising positive score {i}: {base} -> {moved}"))
    } else {
        ensure(moved > base, || format!("raising negative score {i}: {base} -> {moved}"))
    }
}

fn cosent_translation_and_monotone(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..9);
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut levels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    levels[0] = 0;
    levels[1] = 3;
    let base = cosent_loss(&scores, &levels, 20.0).unwrap();
    ensure(base.is_finite() && base >= 0.0, || format!("cosent loss {base}"))?;
    let shift: f64 = rng.gen_range(-5.0..5.0);
    let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
    let moved = cosent_loss(&shifted, &levels, 20.0).unwrap();
    ensure((moved - base).abs() < 1e-9 * base.max(1.0), || format!("translation by {shift}: {base} -> {moved}"))?;
    let top = *levels.iter().max().unwrap();
    let picks: Vec<usize> = (0..n).filter(|&i| levels[i] == top).collect();
    let i = *picks.choose(&mut rng).unwrap();
    let mut up = scores.clone();
    up[i] += rng.gen_range(0.01..0.2);
    let raised = cosent_loss(&up, &levels, 20.0).unwrap();
    ensure(raised <= base, || format!("raising top-level score {i}: {base} -> {raised}"))?;
    let (_, grad) = value_and_grad(&scores, |t, x| cosent(t, x, &levels, 20.0)).unwrap();
    ensure(grad[i] < 0.0, || format!("derivative in top-level score {i} is {}", grad[i]))
}

fn other_losses_nonnegative(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = rng.gen_range(2..5);
    let logits = rand_mat(&mut rng, 1, z);
    let probs = lawmatch_core::autograd::softmax_rows(&logits);
    let ce = ce_loss(probs.as_slice().unwrap(), rng.gen_range(0..z)).unwrap();
    ensure(ce.is_finite() && ce >= 0.0, || format!("cross entropy {ce}"))?;
    let n = rng.gen_range(1..6);
    let rp = lawmatch_core::autograd::softmax_rows(&rand_mat(&mut rng, n, 4));
    let gold: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
    let r = rationale_loss(&rp, Some(&gold)).unwrap();
    ensure(r.is_finite() && r >= 0.0, || format!("rationale loss {r}"))?;
    let (nx, ny) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let c = rand_mat(&mut rng, nx, ny);
    let mut a = Mat::from_shape_fn((nx, ny), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    a[[0, 0]] = 1.0;
    let kl = alignment_kl_loss(&a, &c).unwrap();
    let full_support = a.iter().all(|&v| v == 1.0);
    ensure(kl.is_finite() && (kl > 0.0 || full_support), || format!("alignment KL {kl} for a partial alignment"))?;
    let flat = alignment_kl_loss(&Mat::ones((nx, ny)), &Mat::from_elem((nx, ny), rng.gen_range(-1.0..1.0))).unwrap();
    ensure(flat.abs() < 1e-12, || format!("alignment KL between equal distributions is {flat}"))
}

fn truncation_idempotent(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["theft", "of", "a", "bicycle", "盗窃", "的", "night", "court", "fined", "2024"];
    let ends = [".", "!", "?", "。", "？", "!?", ""];
    let mut text = String::new();
    for _ in 0..rng.gen_range(1..8) {
        for _ in 0..rng.gen_range(1..12) {
            text.push_str(words.choose(&mut rng).unwrap());
            text.push(' ');
        }
        text.push_str(ends.choose(&mut rng).unwrap());
        text.push(' ');
    }
    let (ms, mt) = (rng.gen_range(1..6), rng.gen_range(1..10));
    let out = split_and_truncate(&text, ms, mt).map_err(|e| e.to_string())?;
    ensure(out.len() <= ms, || format!("{} sentences kept, limit {ms}", out.len()))?;
    for s in &out {
        ensure(tokenize(s).len() <= mt, || format!("`{s}` has more than {mt} tokens"))?;
        let again = split_and_truncate(s, ms, mt).map_err(|e| e.to_string())?;
        ensure(again == vec![s.clone()], || format!("re-splitting `{s}` gave {again:?}"))?;
    }
    Ok(())
}

fn synthetic_labels_follow_overlap(seed: u64) -> Check {
    let spec = SyntheticSpec::new(seed, 12, 5);
    let corpus = make_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    for p in &corpus.pairs {
        let a = &corpus.cases[&p.query_id].cited_article_ids;
        let b = &corpus.cases[&p.candidate_id].cited_article_ids;
        let expected = spec.label_for_overlap(a.intersection(b).count());
        ensure(p.label == expected, || format!("pair {} / {} labeled {} not {expected}", p.query_id, p.candidate_id, p.label))?;
    }
    Ok(())
}

fn encoder_batching_and_cache(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = deterministic_test_encoder(16).unwrap();
    let texts: Vec<String> =
        (0..rng.gen_range(1..10)).map(|i| format!("sentence {i} about article {}", rng.gen_range(0..50))).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let whole = enc.encode(&refs).unwrap();
    ensure(whole.ncols() == 16, || "wrong embedding width".into())?;
    let mut at = 0;
    while at < refs.len() {
        let len = rng.gen_range(1..=refs.len() - at);
        let part = enc.encode(&refs[at..at + len]).unwrap();
        let diff = max_abs_diff(&part, &whole.slice(s![at..at + len, ..]).to_owned());
        ensure(diff < 1e-6, || format!("batch grouping changed embeddings by {diff}"))?;
        at += len;
    }
    let cached = CachedEncoder::new(deterministic_test_encoder(16).unwrap(), EmbeddingCache::in_memory());
    let first = cached.encode(&refs).unwrap();
    let second = cached.encode(&refs).unwrap();
    ensure(first == whole && second == whole, || "cached vectors differ from fresh ones".into())
}

fn criterion_invariants() -> Check {
    let checks: [(&str, fn(u64) -> Check); 14] = [
        ("semantic attention sums and correlation range", bim_softmax_and_range),
        ("semantic permutation invariance and max pooling", bim_permutation_invariance_and_pooling),
        ("article attention and AIA sums", lim_softmax_sums),
        ("law distribution permutation equivariance", lim_permutation_equivariance),
        ("legal correlation range and scale invariance", lim_correlation_range_and_scale),
        ("article probability range", article_probability_range),
        ("predicted article set monotonicity", predicted_set_monotone),
        ("match distribution and retrieval score invariances", heads_distribution_and_score),
        ("zlpr monotonicity", zlpr_monotone),
        ("cosent translation invariance and monotonicity", cosent_translation_and_monotone),
        ("remaining losses nonnegative, KL zero iff equal", other_losses_nonnegative),
        ("truncation bounds and idempotence", truncation_idempotent),
        ("synthetic labels follow article overlap", synthetic_labels_follow_overlap),
        ("encoder batch independence and cache transparency", encoder_batching_and_cache),
    ];
    for (name, check) in checks {
        for seed in 0..FIXTURES {
            check(seed).map_err(|e| format!("{name}, fixture {seed}: {e}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

fn grad_summary(reports: &[GradCheckReport]) -> Check {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let bad: Vec<String> =
        reports.iter().filter(|r| !r.passed).map(|r| format!("{} ({:.2e} at {:?}, {} non-finite)", r.name, r.max_rel_error, r.worst, r.non_finite)).collect();
    println!("    {} tensors checked, worst relative error {worst:.3e}", reports.len());
    ensure(bad.is_empty(), || format!("failed tensors: {}", bad.join(", ")))
}

fn tiny_cases(rng: &mut ChaCha8Rng, n: usize, articles: &[String]) -> Vec<Case> {
    (0..n)
        .map(|i| Case {
            id: format!("c{i}"),
            sentences: (0..3).map(|j| format!("s{i}.{j}")).collect(),
            cited_article_ids: articles.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect(),
            rationales: Some((0..3).map(|_| rng.gen_range(0..4)).collect()),
        })
        .collect()
}

fn criterion_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut reports = Vec::new();

    let mut store = ParamStore::default();
    let scores = store.insert("zlpr.scores", rand_mat(&mut rng, 1, 6));
    let labels = [true, false, false, true, false, true];
    reports.extend(
        finite_difference_check(&store, usize::MAX, 0, |t, s| zlpr(t, t.param(s, scores), &labels, 10.0)).unwrap(),
    );
    let mut store = ParamStore::default();
    let scores = store.insert("cosent.scores", rand_mat(&mut rng, 1, 6));
    let levels = [0, 3, 1, 2, 3, 0];
    reports.extend(
        finite_difference_check(&store, usize::MAX, 0, |t, s| cosent(t, t.param(s, scores), &levels, 20.0)).unwrap(),
    );
    let mut store = ParamStore::default();
    let logits = store.insert("ce.logits", rand_mat(&mut rng, 1, 3));
    reports.extend(
        finite_difference_check(&store, usize::MAX, 0, |t, s| cross_entropy(t, t.softmax_rows(t.param(s, logits)), 2))
            .unwrap(),
    );

    let article_ids: Vec<String> = (0..4).map(|k| format!("a{k}")).collect();
    let article_embs = rand_mat(&mut rng, 4, 8);
    let cases = tiny_cases(&mut rng, 6, &article_ids);
    let embs: Vec<Mat> = cases.iter().map(|_| rand_mat(&mut rng, 3, 8)).collect();
    for (variant, aux) in [(Variant::Full, false), (Variant::Full, true), (Variant::LimNoAia, false)] {
        let mut cfg = ModelConfig::tiny(8);
        cfg.variant = variant;
        cfg.seed = 11;
        cfg.loss.enable_align = aux;
        cfg.loss.enable_rationale = aux;
        let base = Model::new(cfg, 3, article_ids.clone(), article_embs.clone(), "test").unwrap();
        let pair = CasePair { query_id: "c0".into(), candidate_id: "c1".into(), label: 2, alignment: Some(vec![(0, 1), (2, 2)]) };
        reports.extend(
            finite_difference_check(&base.store, usize::MAX, 1, |t, s| {
                let mut m = base.clone();
                m.store = s.clone();
                Ok(pair_objective(t, &m, &pair, (&cases[0], &embs[0]), (&cases[1], &embs[1]))?.total)
            })
            .unwrap(),
        );
        if !aux {
            reports.extend(
                finite_difference_check(&base.store, usize::MAX, 2, |t, s| {
                    let mut m = base.clone();
                    m.store = s.clone();
                    let cands: Vec<_> = (1..6).map(|i| ((&cases[i], &embs[i]), (i % 4) as u32)).collect();
                    Ok(query_objective(t, &m, (&cases[0], &embs[0]), &cands)?.total)
                })
                .unwrap(),
            );
        }
    }
    grad_summary(&reports)
}

// ---------------------------------------------------------------- oracles

fn all_grade_lists(max_len: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer.iter().flat_map(|l: &Vec<u32>| (0..4).map(move |g| [l.clone(), vec![g]].concat())).collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn criterion_oracles() -> Check {
    for seed in 0..50 {
        let (mut store, mut rng) = store_rng(1000 + seed);
        let d = 2 * rng.gen_range(1..4);
        let n_l = rng.gen_range(1..7);
        let embs = rand_mat(&mut rng, n_l, d);
        let p = LimParams::new(&mut store, &mut rng, &embs, d, d, 2 * d);
        let n = rng.gen_range(1..9);
        let h = rand_mat(&mut rng, n, d);
        let t = Tape::new();
        let dist = article_attention(&t, &store, &p.attention, t.leaf(h.clone())).unwrap();
        let a = &p.attention;
        let (lambda, reps) = brute_force_attention(
            &h,
            store.get(a.memories),
            store.get(a.w_q.weight),
            store.get(a.w_k.weight),
            store.get(a.w_v.weight),
        );
        let dl = max_abs_diff(&lambda, &t.value(dist.lambda));
        let dr = max_abs_diff(&reps, &t.value(dist.reps));
        ensure(dl < 1e-6 && dr < 1e-6, || format!("attention fixture {seed}: λ diff {dl}, reps diff {dr}"))?;
    }

    let lists = all_grade_lists(6);
    for grades in &lists {
        for k in 1..=6 {
            let mine = ndcg_at_k(grades, k, Default::default());
            let oracle = brute_force_ndcg(grades, k);
            ensure((mine - oracle).abs() < 1e-9, || format!("NDCG@{k} of {grades:?}: {mine} vs {oracle}"))?;
        }
        for min_grade in 1..=3 {
            let rel: Vec<bool> = grades.iter().map(|&g| g >= min_grade).collect();
            ensure(average_precision(&rel) == brute_force_ap(&rel), || format!("AP of {rel:?}"))?;
            for k in (1..=6).chain(CUTOFFS) {
                ensure(precision_at_k(&rel, k) == brute_force_precision(&rel, k), || format!("P@{k} of {rel:?}"))?;
            }
        }
    }
    for group in lists.chunks(7) {
        let report = ranking_report(group, 2, Default::default());
        let rel: Vec<Vec<bool>> = group.iter().map(|g| g.iter().map(|&x| x >= 2).collect()).collect();
        ensure(report.map == brute_force_map(&rel), || format!("MAP of {group:?}: {} vs {}", report.map, brute_force_map(&rel)))?;
    }
    println!("    {} attention fixtures, {} graded lists", 50, lists.len());

    let idx = Bm25Index::new([
        ("d1", "theft of a bicycle"),
        ("d2", "theft theft theft in the night"),
        ("d3", "fraud by phone"),
        ("d4", "bicycle fraud"),
        ("d5", "robbery of a shop at night"),
    ]);
    let table = [("d2", 2.004894379053037), ("d1", 0.8928621559768251), ("d5", 0.7448739533287326)];
    let got = idx.scores("theft night").map_err(|e| e.to_string())?;
    let ids: Vec<&str> = got.iter().map(|(i, _)| i.as_str()).collect();
    ensure(ids == ["d2", "d1", "d5"], || format!("BM25 ranking {ids:?}"))?;
    for ((_, v), (id, want)) in got.iter().zip(table) {
        ensure((v - want).abs() < 1e-12, || format!("BM25 {id}: {v} vs {want}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- late interaction

fn criterion_late_interaction() -> Check {
    let spec = SyntheticSpec::new(21, 21, 6);
    let corpus = make_synthetic_corpus(&spec).unwrap();
    let base = deterministic_test_encoder(16).unwrap();
    let (ids, embs) = encode_articles(&corpus, &base).unwrap();
    let mut cfg = ModelConfig::tiny(16);
    cfg.seed = 5;
    let model = Model::new(cfg, corpus.label_levels, ids, embs, base.name()).unwrap();
    let cases: Vec<&Case> = corpus.cases.values().collect();
    let (query, candidates) = (cases[0], &cases[1..]);
    ensure(candidates.len() == 20, || format!("{} candidates", candidates.len()))?;

    let enc = CountingEncoder::new(deterministic_test_encoder(16).unwrap());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    precompute_all(candidates, &model, &enc, dir.path(), 2).map_err(|e| e.to_string())?;
    let fp = model.fingerprint();
    let caches: Vec<CandidateCache> =
        candidates.iter().map(|c| CandidateCache::load(dir.path(), &c.id, &fp)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    enc.reset();
    let cached = rerank(query, &caches, &model, &enc).map_err(|e| e.to_string())?;
    let (calls, sentences) = (enc.calls(), enc.sentences());
    ensure(calls == 1 && sentences == query.sentences.len(), || {
        format!("cached path made {calls} encoder calls over {sentences} sentences")
    })?;
    let online = rerank_online(query, candidates, &model, &enc).map_err(|e| e.to_string())?;
    let worst = online
        .iter()
        .map(|(id, s)| {
            let c = cached.iter().find(|(i, _)| i == id).map(|(_, v)| *v).unwrap_or(f64::NAN);
            (c - s).abs() / s.abs().max(1e-12)
        })
        .fold(0.0, f64::max);
    println!("    worst relative score difference {worst:.3e}");
    ensure(worst < 1e-5, || format!("scores differ by {worst} relative"))?;
    let order = |r: &[(String, f64)]| r.iter().map(|(i, _)| i.clone()).collect::<Vec<_>>();
    ensure(order(&cached) == order(&online), || "rankings differ".into())
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_SEEDS: u64 = 5;

fn criterion_ablation() -> Check {
    let mut wins = 0;
    for seed in 0..ABLATION_SEEDS {
        let corpus = make_synthetic_corpus(&SyntheticSpec::new(seed, 200, 8)).unwrap();
        let enc = deterministic_test_encoder(32).unwrap();
        let exp = Experiment::new(&corpus, &enc).unwrap();
        let mut f1 = Vec::new();
        for variant in [Variant::Full, Variant::NoLim] {
            let mut cfg = ModelConfig::tiny(32);
            cfg.variant = variant;
            cfg.seed = seed;
            cfg.epochs = 10;
            cfg.batch_size = 4;
            cfg.learning_rate = 2e-3;
            let out = exp.run_fold(Task::Lcm, &cfg, &EvalConfig::default(), 0).map_err(|e| e.to_string())?;
            f1.push(out.matching.expect("matching report").macro_f1);
        }
        let gap = 100.0 * (f1[0] - f1[1]);
        println!("    seed {seed}: full F1 {:.2}, no_lim F1 {:.2}, gap {gap:+.2}", 100.0 * f1[0], 100.0 * f1[1]);
        wins += usize::from(gap >= 5.0);
    }
    ensure(wins >= 4, || format!("full beat no_lim by 5 points on {wins} of {ABLATION_SEEDS} seeds"))
}

// ---------------------------------------------------------------- closed forms

fn criterion_closed_forms() -> Check {
    for (p, n) in [(1usize, 1usize), (2, 3), (0, 4), (4, 0), (3, 5)] {
        let labels: Vec<bool> = (0..p + n).map(|k| k < p).collect();
        let got = zlpr_loss(&vec![0.0; p + n], &labels, 10.0).unwrap();
        let want = (1.0 + p as f64).ln() + (1.0 + n as f64).ln();
        ensure((got - want).abs() < 1e-9, || format!("zlpr with {p} positive, {n} negative: {got} vs {want}"))?;
    }
    let got = cosent_loss(&[0.4, 0.4], &[0, 1], 20.0).unwrap();
    ensure((got - 2f64.ln()).abs() < 1e-9, || format!("cosent equal scores {got}"))?;
    let third = 1.0 / 3.0;
    let got = ce_loss(&[third, third, third], 1).unwrap();
    ensure((got - 3f64.ln()).abs() < 1e-9, || format!("uniform cross entropy {got}"))
}

// ---------------------------------------------------------------- reproducibility

fn run_csvs() -> Result<(String, String), String> {
    let corpus = make_synthetic_corpus(&SyntheticSpec::new(4, 60, 6)).unwrap();
    let enc = deterministic_test_encoder(8).unwrap();
    let exp = Experiment::new(&corpus, &enc).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::tiny(8);
    cfg.epochs = 2;
    cfg.seed = 9;
    cfg.folds = 3;
    cfg.learning_rate = 1e-3;
    let mut out = Vec::new();
    for task in [Task::Lcm, Task::Lcr] {
        let folds = (0..cfg.folds)
            .map(|f| exp.run_fold(task, &cfg, &EvalConfig::default(), f))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        out.push(fold_csv(&folds));
    }
    Ok((out.remove(0), out.remove(0)))
}

fn criterion_reproducibility() -> Check {
    let a = run_csvs()?;
    let b = run_csvs()?;
    ensure(a.0.as_bytes() == b.0.as_bytes(), || format!("matching CSVs differ:\n{}\n{}", a.0, b.0))?;
    ensure(a.1.as_bytes() == b.1.as_bytes(), || format!("ranking CSVs differ:\n{}\n{}", a.1, b.1))?;
    ensure(a.0.lines().count() == 5 && a.1.lines().count() == 5, || "expected header, 3 folds and a mean row".into())
}

// ---------------------------------------------------------------- real corpus

const REFERENCE_MAP: f64 = 56.69;

fn criterion_lecard(dir: &Path) -> Check {
    let cfg = match std::env::var_os("LAWMATCH_LECARD_CONFIG") {
        Some(p) => RunConfig::load(Path::new(&p)).map_err(|e| e.to_string())?,
        None => RunConfig { task: Task::Lcr, ..RunConfig::default() },
    };
    let opts = LoadOptions { max_sentences: cfg.model.max_sentences, max_tokens: cfg.model.max_tokens, ..Default::default() };
    let corpus = lawmatch_core::data::filter_articles(load_corpus(dir, opts).map_err(|e| e.to_string())?, cfg.min_support)
        .map_err(|e| e.to_string())?;
    let enc = from_config(&cfg.encoder, cfg.model.d_b).map_err(|e| e.to_string())?;
    let exp = Experiment::new(&corpus, &enc).map_err(|e| e.to_string())?;
    let folds = (0..cfg.model.folds)
        .map(|f| exp.run_fold(Task::Lcr, &cfg.model, &cfg.eval, f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let csv = fold_csv(&folds);
    println!("{csv}");
    let map = 100.0 * folds.iter().filter_map(|f| f.ranking).map(|r| r.map).sum::<f64>() / folds.len() as f64;
    println!("    mean MAP {map:.2} (published reference {REFERENCE_MAP})");
    Ok(())
}

// ---------------------------------------------------------------- driver

fn run(label: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let took = fmt(start.elapsed());
    match outcome {
        Ok(()) => {
            println!("PASS  {label} ({took})");
            true
        }
        Err(e) => {
            println!("FAIL  {label} ({took}): {e}");
            false
        }
    }
}

fn fmt(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check>)> = vec![
        ("1 numerical invariants on 100 seeded fixtures each", Box::new(criterion_invariants)),
        ("2 finite-difference gradient checks", Box::new(criterion_gradients)),
        ("3 oracle equivalence (attention, metrics, BM25)", Box::new(criterion_oracles)),
        ("4 late-interaction equivalence over 20 cached candidates", Box::new(criterion_late_interaction)),
        ("5 synthetic ablation: full beats no_lim by 5 F1 points", Box::new(criterion_ablation)),
        ("6 loss closed forms", Box::new(criterion_closed_forms)),
        ("7 byte-identical metric CSVs across runs", Box::new(criterion_reproducibility)),
    ];
    let mut failed = 0;
    for (label, f) in criteria {
        let number = label.split(' ').next().unwrap_or_default();
        if !only.is_empty() && !only.iter().any(|o| o == number) {
            continue;
        }
        failed += usize::from(!run(label, f));
    }
    let lecard = "8 LeCaRD retrieval run";
    match std::env::var_os("LAWMATCH_LECARD_DIR") {
        Some(dir) => failed += usize::from(!run(lecard, || criterion_lecard(Path::new(&dir)))),
        None => println!("SKIP  {lecard} (set LAWMATCH_LECARD_DIR to enable)"),
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
