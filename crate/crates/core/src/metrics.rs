//! Evaluation metrics: accuracy, BIO entity F1, SQuAD-style token F1,
//! NDCG@k and seed-level confidence intervals.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape("accuracy: prediction and gold lengths differ"));
    }
    if preds.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// An entity mention: `(type, start, end)` with `end` inclusive.
pub type Span = (usize, usize, usize);

/// Decodes BIO tag ids (0 = O, `1 + 2e` = B-e, `2 + 2e` = I-e) into spans.
/// An I tag that does not continue a span of the same type opens a new one.
pub fn bio_spans(tags: &[usize]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let (is_begin, ty) = match tag {
            0 => (false, None),
            t if t % 2 == 1 => (true, Some((t - 1) / 2)),
            t => (false, Some((t - 2) / 2)),
        };
        match (open, ty) {
            (Some((oty, start)), Some(t)) if !is_begin && oty == t => {
                open = Some((oty, start));
            }
            _ => {
                if let Some((oty, start)) = open.take() {
                    spans.push((oty, start, i - 1));
                }
                open = ty.map(|t| (t, i));
            }
        }
    }
    if let Some((oty, start)) = open {
        spans.push((oty, start, tags.len() - 1));
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrfCounts {
    /// F1 = 2tp / (2tp + fp + fn); 1.0 when there is nothing to find and nothing predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Micro-averaged exact-match span F1 over a corpus of tag sequences.
pub fn entity_f1(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    Ok(entity_counts(preds, golds)?.f1())
}

pub fn entity_counts(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<PrfCounts> {
    if preds.len() != golds.len() {
        return Err(Error::shape("entity_f1: different numbers of sequences"));
    }
    let mut c = PrfCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::shape("entity_f1: tag sequence lengths differ"));
        }
        let ps = bio_spans(p);
        let gs = bio_spans(g);
        let tp = ps.iter().filter(|s| gs.contains(s)).count();
        c.tp += tp;
        c.fp += ps.len() - tp;
        c.fn_ += gs.len() - tp;
    }
    Ok(c)
}

/// Micro F1 over individual non-O tags.
pub fn token_tag_f1(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    let mut c = PrfCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::shape("token_tag_f1: tag sequence lengths differ"));
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a != 0, b != 0) {
                (true, true) if a == b => c.tp += 1,
                (true, true) => {
                    c.fp += 1;
                    c.fn_ += 1;
                }
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if preds.len() != golds.len() {
        return Err(Error::shape("token_tag_f1: different numbers of sequences"));
    }
    Ok(c.f1())
}

/// Token-overlap F1 between two answers given as token lists. Two empty
/// answers (both "no answer") score 1, exactly one empty scores 0.
pub fn qa_f1(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<usize, isize> = HashMap::new();
    for &t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for &t in pred {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// NDCG@k with gain equal to relevance and discount `1/log2(rank+1)`.
/// Returns `None` when no document is relevant.
pub fn ndcg_at_k<D: Eq + std::hash::Hash>(ranked: &[D], relevance: &HashMap<D, f64>, k: usize) -> Option<f64> {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| relevance.get(d).copied().unwrap_or(0.0) / (i as f64 + 2.0).log2())
        .sum();
    let mut ideal: Vec<f64> = relevance.values().copied().filter(|&r| r > 0.0).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, r)| r / (i as f64 + 2.0).log2()).sum();
    (idcg > 0.0).then(|| dcg / idcg)
}

pub fn ndcg_at_10<D: Eq + std::hash::Hash>(ranked: &[D], relevance: &HashMap<D, f64>) -> Option<f64> {
    ndcg_at_k(ranked, relevance, 10)
}

/// Mean of per-query scores, plus the number of queries skipped because
/// they had no relevant documents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingSummary {
    pub mean: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn summarize_ranking(scores: &[Option<f64>]) -> RankingSummary {
    let evaluated: Vec<f64> = scores.iter().flatten().copied().collect();
    let mean = if evaluated.is_empty() { 0.0 } else { evaluated.iter().sum::<f64>() / evaluated.len() as f64 };
    RankingSummary { mean, evaluated: evaluated.len(), skipped: scores.len() - evaluated.len() }
}

/// Mean and normal-approximation 95% half-width `1.96·s/√n` with the
/// sample standard deviation; the half-width is `None` for fewer than two values.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(1.96 * var.sqrt() / (n as f64).sqrt()))
}
