//! Numerical checkers and naive reference implementations.
//!
//! The oracles below are deliberately written as plain loops over slices and
//! do not call into the modules they are used to check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Denominator floor. Below it the check is effectively absolute (`< 1e-9`),
/// which is the round-off level of a central difference at this step.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose analytic gradient or perturbed loss is not finite.
    pub non_finite: usize,
    /// `(row, col, analytic, numeric)` of the entry with the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

/// Loss value and parameter gradients of a tape-built scalar.
pub fn value_and_grads(
    store: &ParamStore,
    build: &dyn Fn(&Tape, &ParamStore) -> Result<Var>,
) -> Result<(f64, Vec<(ParamId, Mat)>)> {
    let t = Tape::new();
    let loss = build(&t, store)?;
    let g = t.backward(loss);
    Ok((t.scalar(loss), t.param_grads(&g)))
}

fn value(store: &ParamStore, build: &dyn Fn(&Tape, &ParamStore) -> Result<Var>) -> f64 {
    let t = Tape::new();
    match build(&t, store) {
        Ok(v) => t.scalar(v),
        Err(_) => f64::NAN,
    }
}

/// Central-difference check of every parameter tensor, sampling at most
/// `samples` entries per tensor.
pub fn finite_difference_check(
    store: &ParamStore,
    samples: usize,
    seed: u64,
    build: impl Fn(&Tape, &ParamStore) -> Result<Var>,
) -> Result<Vec<GradCheckReport>> {
    let (_, analytic) = value_and_grads(store, &build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut reports = Vec::new();
    for id in store.ids() {
        let shape = store.get(id).dim();
        let len = shape.0 * shape.1;
        let zero = Mat::zeros(shape);
        let grad = analytic.iter().find(|(k, _)| *k == id).map_or(&zero, |(_, g)| g);
        let picks: Vec<usize> = if len <= samples { (0..len).collect() } else { sample(&mut rng, len, samples).into_vec() };
        let mut report = GradCheckReport { name: store.name(id).to_string(), max_rel_error: 0.0, checked: 0, non_finite: 0, worst: None, passed: true };
        for flat in picks {
            let (r, c) = (flat / shape.1, flat % shape.1);
            let w = store.get(id)[[r, c]];
            let h = STEP * w.abs().max(1.0);
            work.get_mut(id)[[r, c]] = w + h;
            let up = value(&work, &build);
            work.get_mut(id)[[r, c]] = w - h;
            let down = value(&work, &build);
            work.get_mut(id)[[r, c]] = w;
            report.checked += 1;
            let a = grad[[r, c]];
            if !up.is_finite() || !down.is_finite() || !a.is_finite() {
                report.non_finite += 1;
                report.passed = false;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((r, c, a, numeric));
            }
        }
        report.passed &= report.max_rel_error < GRAD_TOLERANCE;
        reports.push(report);
    }
    Ok(reports)
}

fn dot_col(x: &[f64], w: &Mat, col: usize) -> f64 {
    let mut s = 0.0;
    for (r, xv) in x.iter().enumerate() {
        s += xv * w[[r, col]];
    }
    s
}

fn project(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..w.ncols() {
        out.push(dot_col(x, w, c));
    }
    out
}

/// Attention scores `λ` and per-article sums by explicit loops.
pub fn brute_force_attention(h: &Mat, memories: &Mat, w_q: &Mat, w_k: &Mat, w_v: &Mat) -> (Mat, Mat) {
    let n = h.nrows();
    let n_l = memories.nrows();
    let d_h = w_v.ncols();
    let rows = |m: &Mat, i: usize| -> Vec<f64> { (0..m.ncols()).map(|c| m[[i, c]]).collect() };
    let mut lambda = Mat::zeros((n, n_l));
    let mut reps = Mat::zeros((n_l, d_h));
    for k in 0..n_l {
        let q = project(&rows(memories, k), w_q);
        let mut scores = Vec::new();
        for i in 0..n {
            let key = project(&rows(h, i), w_k);
            let mut s = 0.0;
            for d in 0..q.len() {
                s += q[d] * key[d];
            }
            lambda[[i, k]] = s;
            scores.push(s);
        }
        let mut top = f64::NEG_INFINITY;
        for &s in &scores {
            if s > top {
                top = s;
            }
        }
        let mut z = 0.0;
        for &s in &scores {
            z += (s - top).exp();
        }
        for i in 0..n {
            let g = (scores[i] - top).exp() / z;
            let v = project(&rows(h, i), w_v);
            for d in 0..d_h {
                reps[[k, d]] += g * v[d];
            }
        }
    }
    (lambda, reps)
}

/// Precision at `k` by counting.
pub fn brute_force_precision(relevant: &[bool], k: usize) -> f64 {
    let mut hits = 0;
    for i in 0..k {
        if i < relevant.len() && relevant[i] {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

/// Average precision by recounting hits above every relevant position.
pub fn brute_force_ap(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for pos in 0..relevant.len() {
        if relevant[pos] {
            let above = relevant[..=pos].iter().filter(|&&r| r).count();
            sum += above as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Mean average precision over lists that contain a relevant item.
pub fn brute_force_map(lists: &[Vec<bool>]) -> f64 {
    let aps: Vec<f64> = lists.iter().filter_map(|l| brute_force_ap(l)).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn raw_dcg(grades: &[u32], k: usize) -> f64 {
    let mut s = 0.0;
    for (i, &g) in grades.iter().enumerate().take(k) {
        s += (2f64.powi(g as i32) - 1.0) / (i as f64 + 2.0).log2();
    }
    s
}

fn permutations(items: &mut Vec<u32>, start: usize, best: &mut f64, k: usize) {
    if start == items.len() {
        *best = best.max(raw_dcg(items, k));
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permutations(items, start + 1, best, k);
        items.swap(start, i);
    }
}

/// NDCG@k with exponential gain, the ideal found by trying every ordering.
pub fn brute_force_ndcg(grades: &[u32], k: usize) -> f64 {
    let mut best = 0.0;
    permutations(&mut grades.to_vec(), 0, &mut best, k);
    if best == 0.0 {
        0.0
    } else {
        raw_dcg(grades, k) / best
    }
}
