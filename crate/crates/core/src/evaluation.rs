//! Detection and classification metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A metric value; `degenerate` marks a zero denominator, in which case
/// `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Self { value: 0.0, degenerate: true }
        } else {
            Self { value: num / den, degenerate: false }
        }
    }
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by score, ascending.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve from the rank-sum statistic, ties at midrank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let idx = order(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision-recall curve as the step sum `Σ ΔR · P` over
/// distinct thresholds, highest first.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    let idx = order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut j = idx.len();
    while j > 0 {
        let v = scores[idx[j - 1]];
        while j > 0 && scores[idx[j - 1]] == v {
            if labels[idx[j - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j -= 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn binary_counts(preds: &[bool], labels: &[bool]) -> Result<BinaryCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut c = BinaryCounts::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2PR / (P + R)`; zero precision for an empty prediction set.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Score {
    let precision = Score::ratio(tp as f64, (tp + fp) as f64);
    let recall = Score::ratio(tp as f64, (tp + fn_) as f64);
    let f = Score::ratio(2.0 * precision.value * recall.value, precision.value + recall.value);
    Score { value: f.value, degenerate: f.degenerate || precision.degenerate || recall.degenerate }
}

pub fn f1(preds: &[bool], labels: &[bool]) -> Result<Score> {
    let c = binary_counts(preds, labels)?;
    Ok(f1_from_counts(c.tp, c.fp, c.fn_))
}

pub fn precision(preds: &[bool], labels: &[bool]) -> Result<Score> {
    let c = binary_counts(preds, labels)?;
    Ok(Score::ratio(c.tp as f64, (c.tp + c.fp) as f64))
}

/// `(TP / (TP + FN), TN / (TN + FP))`.
pub fn sensitivity_specificity(preds: &[bool], labels: &[bool]) -> Result<(Score, Score)> {
    let c = binary_counts(preds, labels)?;
    Ok((Score::ratio(c.tp as f64, (c.tp + c.fn_) as f64), Score::ratio(c.tn as f64, (c.tn + c.fp) as f64)))
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn support(&self, class: usize) -> usize {
        (0..self.n_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Each row divided by its support; rows without support stay zero.
    pub fn normalized(&self) -> Vec<f64> {
        let n = self.n_classes;
        let mut out = vec![0.0; n * n];
        for t in 0..n {
            let s = self.support(t);
            if s > 0 {
                for p in 0..n {
                    out[t * n + p] = self.get(t, p) as f64 / s as f64;
                }
            }
        }
        out
    }

    pub fn per_class_accuracy(&self) -> Vec<f64> {
        let norm = self.normalized();
        (0..self.n_classes).map(|c| norm[c * self.n_classes + c]).collect()
    }

    /// One-vs-rest F1 of `class`.
    pub fn class_f1(&self, class: usize) -> Score {
        let tp = self.get(class, class);
        let predicted: usize = (0..self.n_classes).map(|t| self.get(t, class)).sum();
        f1_from_counts(tp, predicted - tp, self.support(class) - tp)
    }

    /// Support-weighted mean of the per-class F1 scores.
    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.n_classes).map(|c| self.support(c) as f64 / total as f64 * self.class_f1(c).value).sum()
    }
}

fn check_classes(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::ClassOutOfRange { index: bad, n_classes });
    }
    Ok(())
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    check_classes(preds, labels, n_classes)?;
    let mut counts = vec![0; n_classes * n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Support-weighted one-vs-rest F1, tallied directly from the pairs.
pub fn weighted_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_classes(preds, labels, n_classes)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &t) in preds.iter().zip(labels) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        total += (tp + fn_) as f64 / labels.len() as f64 * f1_from_counts(tp, fp, fn_).value;
    }
    Ok(total)
}

/// Index of the largest entry of each `n_classes`-wide row (first on ties).
pub fn argmax_rows(logits: &[f64], n_classes: usize) -> Vec<usize> {
    logits
        .chunks(n_classes)
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Everything reported for a binary detector at a fixed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub threshold: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub f1: Score,
    pub precision: Score,
    pub sensitivity: Score,
    pub specificity: Score,
    pub counts: BinaryCounts,
}

pub fn detection_metrics(probs: &[f64], labels: &[bool], threshold: f64) -> Result<DetectionMetrics> {
    let preds: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let (sensitivity, specificity) = sensitivity_specificity(&preds, labels)?;
    Ok(DetectionMetrics {
        threshold,
        auroc: auroc(probs, labels)?,
        aupr: aupr(probs, labels)?,
        f1: f1(&preds, labels)?,
        precision: precision(&preds, labels)?,
        sensitivity,
        specificity,
        counts: binary_counts(&preds, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub normalized_confusion: Vec<f64>,
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    let cm = confusion(preds, labels, n_classes)?;
    Ok(ClassificationMetrics {
        weighted_f1: cm.weighted_f1(),
        per_class_f1: (0..n_classes).map(|c| cm.class_f1(c).value).collect(),
        normalized_confusion: cm.normalized(),
        confusion: cm,
    })
}
