//! Frame-level detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold for accuracy, precision and recall.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check(scores: &[f64], truth: &[u8]) -> Result<usize> {
    if scores.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} truth frames",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("score {i} is not finite")));
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(Error::Evaluation("truth must be 0 or 1".into()));
    }
    let positives = truth.iter().filter(|&&t| t == 1).count();
    if positives == 0 {
        return Err(Error::Evaluation(
            "no positive frames; AP is undefined".into(),
        ));
    }
    Ok(positives)
}

/// Area under the precision-recall curve, with one step per distinct score:
/// `sum_n (R_n - R_{n-1}) P_n` over thresholds in decreasing order.
pub fn average_precision(scores: &[f64], truth: &[u8]) -> Result<f64> {
    let positives = check(scores, truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        ap += step(tp, fp, prev_tp, positives);
        prev_tp = tp;
    }
    Ok(ap)
}

fn step(tp: usize, fp: usize, prev_tp: usize, positives: usize) -> f64 {
    let recall_gain = (tp - prev_tp) as f64 / positives as f64;
    recall_gain * (tp as f64 / (tp + fp) as f64)
}

/// Same quantity as [`average_precision`], computed by re-counting the
/// confusion matrix from scratch at every distinct threshold.
pub fn average_precision_brute_force(scores: &[f64], truth: &[u8]) -> Result<f64> {
    let positives = check(scores, truth)?;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &tau in &thresholds {
        let tp = (0..scores.len())
            .filter(|&i| scores[i] >= tau && truth[i] == 1)
            .count();
        let fp = (0..scores.len())
            .filter(|&i| scores[i] >= tau && truth[i] == 0)
            .count();
        ap += step(tp, fp, prev_tp, positives);
        prev_tp = tp;
    }
    Ok(ap)
}

/// Accuracy, precision and recall with frames predicted anomalous when
/// `score >= 0.5`. Precision is 0 when nothing is predicted anomalous.
pub fn threshold_metrics(scores: &[f64], truth: &[u8]) -> Result<(f64, f64, f64)> {
    let positives = check(scores, truth)?;
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut correct = 0usize;
    for (&s, &t) in scores.iter().zip(truth) {
        let p = s >= THRESHOLD;
        predicted += p as usize;
        tp += (p && t == 1) as usize;
        correct += (p == (t == 1)) as usize;
    }
    let accuracy = correct as f64 / scores.len() as f64;
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = tp as f64 / positives as f64;
    Ok((accuracy, precision, recall))
}

pub fn compute_metrics(scores: &[f64], truth: &[u8]) -> Result<Metrics> {
    let ap = average_precision(scores, truth)?;
    let (accuracy, precision, recall) = threshold_metrics(scores, truth)?;
    Ok(Metrics {
        ap,
        accuracy,
        precision,
        recall,
    })
}
