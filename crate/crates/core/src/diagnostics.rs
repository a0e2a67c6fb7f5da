//! Process-wide counters for degenerate inputs that are handled rather than fatal.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

#[derive(Debug, Default)]
pub struct Counters {
    /// Cosines evaluated with a zero-norm operand (defined as 0).
    pub zero_norm_cosine: AtomicUsize,
    /// Article-intervened attention fell back to the all-article mean.
    pub empty_predicted_articles: AtomicUsize,
    /// Cases without rationale labels skipped by the rationale loss.
    pub missing_rationales: AtomicUsize,
    /// Pairs without any aligned cell skipped by the alignment loss.
    pub empty_alignment: AtomicUsize,
    /// Queries without relevant candidates excluded from MAP.
    pub queries_without_relevant: AtomicUsize,
    /// Classes absent from both gold labels and predictions.
    pub absent_classes: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub zero_norm_cosine: usize,
    pub empty_predicted_articles: usize,
    pub missing_rationales: usize,
    pub empty_alignment: usize,
    pub queries_without_relevant: usize,
    pub absent_classes: usize,
}

pub static COUNTERS: Counters = Counters {
    zero_norm_cosine: AtomicUsize::new(0),
    empty_predicted_articles: AtomicUsize::new(0),
    missing_rationales: AtomicUsize::new(0),
    empty_alignment: AtomicUsize::new(0),
    queries_without_relevant: AtomicUsize::new(0),
    absent_classes: AtomicUsize::new(0),
};

pub fn bump(counter: &AtomicUsize, by: usize) {
    if by > 0 {
        counter.fetch_add(by, Ordering::Relaxed);
    }
}

pub fn snapshot() -> Snapshot {
    let c = &COUNTERS;
    let get = |a: &AtomicUsize| a.load(Ordering::Relaxed);
    Snapshot {
        zero_norm_cosine: get(&c.zero_norm_cosine),
        empty_predicted_articles: get(&c.empty_predicted_articles),
        missing_rationales: get(&c.missing_rationales),
        empty_alignment: get(&c.empty_alignment),
        queries_without_relevant: get(&c.queries_without_relevant),
        absent_classes: get(&c.absent_classes),
    }
}
