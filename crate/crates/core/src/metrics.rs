//! Classification metrics over predicted class distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub f1_macro: f64,
    pub f1_micro: f64,
    /// One-vs-rest macro ROC-AUC; NaN when no class has both positives and negatives.
    pub auc: f64,
    pub accuracy: f64,
}

/// Row-wise argmax, ties to the smaller class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `confusion[true][pred]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

/// Macro F1 averaged over the classes that occur in `truth` or `pred`.
/// A class with no true positives scores 0.
pub fn f1_macro(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let m = confusion_matrix(truth, pred, n_classes);
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let tp = m[c][c];
        let support: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        counted += 1;
        let denom = support + predicted;
        total += 2.0 * tp as f64 / denom as f64;
    }
    if counted == 0 {
        f64::NAN
    } else {
        total / counted as f64
    }
}

/// Micro F1, which equals accuracy for single-label predictions.
pub fn f1_micro(truth: &[usize], pred: &[usize]) -> f64 {
    accuracy(truth, pred)
}

/// Area under the ROC curve of `scores` for the binary labels `positive`,
/// integrated with the trapezoid rule over distinct score thresholds.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// One-vs-rest macro AUC over classes with both positive and negative nodes.
pub fn auc_ovr_macro(probs: &Tensor, truth: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..probs.cols() {
        let scores: Vec<f64> = (0..probs.rows()).map(|r| probs.get(r, c)).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(a) = roc_auc(&scores, &positive) {
            total += a;
            counted += 1;
        }
    }
    if counted == 0 {
        f64::NAN
    } else {
        total / counted as f64
    }
}

/// All metrics for the rows `nodes` of `probs` against `(node, label)` targets.
pub fn evaluate(probs: &Tensor, targets: &[(usize, usize)]) -> Result<Metrics> {
    if targets.is_empty() {
        return Err(Error::Argument("no targets to evaluate".into()));
    }
    let rows: Vec<usize> = targets.iter().map(|&(i, _)| i).collect();
    let truth: Vec<usize> = targets.iter().map(|&(_, y)| y).collect();
    if let Some(&bad) = rows.iter().find(|&&i| i >= probs.rows()) {
        return Err(Error::Shape(format!("node {bad} beyond {} prediction rows", probs.rows())));
    }
    if let Some(&bad) = truth.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::Shape(format!("label {bad} beyond {} classes", probs.cols())));
    }
    let sub = probs.gather_rows(&rows);
    let pred = argmax_rows(&sub);
    Ok(Metrics {
        f1_macro: f1_macro(&truth, &pred, probs.cols()),
        f1_micro: f1_micro(&truth, &pred),
        auc: auc_ovr_macro(&sub, &truth),
        accuracy: accuracy(&truth, &pred),
    })
}
