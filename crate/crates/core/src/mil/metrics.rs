use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic; tied scores count ½.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::invalid("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC over the flattened `(bag, class)` indicator matrix.
pub fn micro_auc(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::invalid("labels and probabilities differ in length"));
    }
    let first = labels.first().ok_or_else(|| Error::invalid("empty split"))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::invalid("AUC is undefined for a single-class split"));
    }
    let mut flat_labels = Vec::new();
    let mut flat_scores = Vec::new();
    for (&l, p) in labels.iter().zip(probs) {
        for (c, &s) in p.iter().enumerate() {
            flat_labels.push(c == l);
            flat_scores.push(s);
        }
    }
    roc_auc(&flat_labels, &flat_scores)
}

/// Unweighted mean of per-class F1 over classes `0..classes`; a class with
/// no true or predicted members scores 0.
pub fn macro_f1(labels: &[usize], preds: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = labels.iter().zip(preds).filter(|(l, p)| **l == c && **p == c).count() as f64;
        let fp = labels.iter().zip(preds).filter(|(l, p)| **l != c && **p == c).count() as f64;
        let fn_ = labels.iter().zip(preds).filter(|(l, p)| **l == c && **p != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / classes as f64
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().zip(preds).filter(|(l, p)| l == p).count() as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Metrics from class probabilities.
pub fn classification_metrics(labels: &[usize], probs: &[Vec<f64>], classes: usize) -> Result<Metrics> {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(Metrics {
        auc: micro_auc(labels, probs)?,
        macro_f1: macro_f1(labels, &preds, classes),
        accuracy: accuracy(labels, &preds),
    })
}
