//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error over equal-width confidence bins:
/// `sum_b (n_b / N) |acc_b - conf_b|`. Each entry is the winner's
/// probability and whether the prediction was correct.
pub fn ece(predictions: &[(f64, bool)], bins: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidConfig(
            "ECE of an empty prediction list".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for &(p, correct) in predictions {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "confidence {p} outside [0, 1]"
            )));
        }
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        hits[b] += f64::from(u8::from(correct));
    }
    let n = predictions.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `U / (n+ n-)`, with ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidConfig(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // the arithmetic stays in integers.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += doubled_rank * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// One query decision: whether the learner queried, and whether its
/// prediction at that moment was correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub queried: bool,
    pub prediction_correct: bool,
}

impl QueryDecision {
    /// A decision is correct when it queries exactly when the prediction is
    /// wrong.
    pub fn is_correct(&self) -> bool {
        self.queried != self.prediction_correct
    }
}

pub fn query_success_rate(decisions: &[QueryDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::InvalidConfig(
            "no query decisions were logged".into(),
        ));
    }
    let ok = decisions.iter().filter(|d| d.is_correct()).count();
    Ok(ok as f64 / decisions.len() as f64)
}

/// Precision of `class` over parallel prediction and truth lists; zero when
/// nothing was predicted as `class`.
pub fn precision(predicted: &[u32], truth: &[u32], class: u32) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == class {
            if t == class {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn accuracy(predicted: &[u32], truth: &[u32]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / predicted.len() as f64
}
