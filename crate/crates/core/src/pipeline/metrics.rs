//! Ranking and classification metrics, and their CSV export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::GainKind;
use crate::diagnostics::{bump, COUNTERS};

pub const CUTOFFS: [usize; 4] = [5, 10, 20, 30];

fn gain(rel: u32, kind: GainKind) -> f64 {
    match kind {
        GainKind::Exponential => 2f64.powi(rel as i32) - 1.0,
        GainKind::Linear => rel as f64,
    }
}

fn dcg(rels: &[u32], k: usize, kind: GainKind) -> f64 {
    rels.iter().take(k).enumerate().map(|(i, &r)| gain(r, kind) / ((i + 2) as f64).log2()).sum()
}

/// NDCG@k of grades listed in ranked order; the ideal ordering sorts the same grades.
/// A list without any positive gain scores 0.
pub fn ndcg_at_k(ranked: &[u32], k: usize, kind: GainKind) -> f64 {
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(&ideal, k, kind);
    if best == 0.0 {
        return 0.0;
    }
    dcg(ranked, k, kind) / best
}

/// Fraction of the top `k` positions holding a relevant item; missing positions count as misses.
pub fn precision_at_k(relevant: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    relevant.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

/// Average precision; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Binarize grades: relevant when `grade ≥ min_grade`.
pub fn binarize(grades: &[u32], min_grade: u32) -> Vec<bool> {
    grades.iter().map(|&g| g >= min_grade).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RankingReport {
    /// NDCG at each of [`CUTOFFS`].
    pub ndcg: [f64; 4],
    pub precision: [f64; 4],
    pub map: f64,
    pub queries: usize,
    /// Queries without a relevant candidate, left out of MAP.
    pub excluded_from_map: usize,
    pub relevant_min_grade: u32,
}

/// Mean metrics over queries, each given as its grades in ranked order.
pub fn ranking_report(rankings: &[Vec<u32>], relevant_min_grade: u32, kind: GainKind) -> RankingReport {
    let mut r = RankingReport { relevant_min_grade, queries: rankings.len(), ..Default::default() };
    if rankings.is_empty() {
        return r;
    }
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for grades in rankings {
        let rel = binarize(grades, relevant_min_grade);
        for (i, &k) in CUTOFFS.iter().enumerate() {
            r.ndcg[i] += ndcg_at_k(grades, k, kind);
            r.precision[i] += precision_at_k(&rel, k);
        }
        match average_precision(&rel) {
            Some(ap) => {
                ap_sum += ap;
                ap_n += 1;
            }
            None => r.excluded_from_map += 1,
        }
    }
    bump(&COUNTERS.queries_without_relevant, r.excluded_from_map);
    let n = rankings.len() as f64;
    r.ndcg.iter_mut().for_each(|v| *v /= n);
    r.precision.iter_mut().for_each(|v| *v /= n);
    r.map = if ap_n > 0 { ap_sum / ap_n as f64 } else { 0.0 };
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MatchingReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub pairs: usize,
}

/// Accuracy and macro-averaged precision, recall and F1 over `classes` classes.
pub fn matching_report(gold: &[usize], pred: &[usize], classes: usize) -> MatchingReport {
    assert_eq!(gold.len(), pred.len(), "gold and predictions differ in length");
    let n = gold.len();
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let mut report = MatchingReport { pairs: n, ..Default::default() };
    if n == 0 || classes == 0 {
        return report;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    report.accuracy = correct as f64 / n as f64;
    let mut absent = 0;
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..classes).map(|g| confusion[g][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted == 0 && actual == 0 {
            absent += 1;
        }
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        report.macro_precision += p;
        report.macro_recall += r;
        report.per_class_f1.push(f);
    }
    bump(&COUNTERS.absent_classes, absent);
    let k = classes as f64;
    report.macro_precision /= k;
    report.macro_recall /= k;
    report.macro_f1 = report.per_class_f1.iter().sum::<f64>() / k;
    report
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Per-fold rows plus a mean row, metric values ×100 with two decimals.
pub fn ranking_csv(folds: &[RankingReport]) -> String {
    let mut s = String::from("fold,N@5,N@10,N@20,N@30,P@5,P@10,P@20,P@30,MAP,relevant_min_grade\n");
    let row = |s: &mut String, name: &str, r: &RankingReport| {
        let cells: Vec<String> = r.ndcg.iter().chain(&r.precision).chain([&r.map]).map(|&v| pct(v)).collect();
        writeln!(s, "{name},{},{}", cells.join(","), r.relevant_min_grade).unwrap();
    };
    for (i, r) in folds.iter().enumerate() {
        row(&mut s, &i.to_string(), r);
    }
    if !folds.is_empty() {
        let n = folds.len() as f64;
        let mut mean = RankingReport { relevant_min_grade: folds[0].relevant_min_grade, ..Default::default() };
        for r in folds {
            for i in 0..4 {
                mean.ndcg[i] += r.ndcg[i] / n;
                mean.precision[i] += r.precision[i] / n;
            }
            mean.map += r.map / n;
        }
        row(&mut s, "mean", &mean);
    }
    s
}

pub fn matching_csv(folds: &[MatchingReport]) -> String {
    let mut s = String::from("fold,Acc,MP,MR,F1\n");
    let row = |s: &mut String, name: &str, v: [f64; 4]| {
        writeln!(s, "{name},{},{},{},{}", pct(v[0]), pct(v[1]), pct(v[2]), pct(v[3])).unwrap();
    };
    let vals = |r: &MatchingReport| [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1];
    for (i, r) in folds.iter().enumerate() {
        row(&mut s, &i.to_string(), vals(r));
    }
    if !folds.is_empty() {
        let n = folds.len() as f64;
        let mut mean = [0.0; 4];
        for r in folds {
            for (m, v) in mean.iter_mut().zip(vals(r)) {
                *m += v / n;
            }
        }
        row(&mut s, "mean", mean);
    }
    s
}
