//! Evaluation metrics: ranking AUC, classification accuracy, and regression
//! error.

use serde::{Deserialize, Serialize};

use crate::error::{FigError, Result};

/// One metric evaluation, optionally broken down by seed when several runs
/// were aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<(u64, f64)>,
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, with ties counting half. Computed from average ranks, which
/// equals brute-force pair counting exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FigError::Argument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(FigError::Argument(format!("labels must be 0 or 1, got {bad}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(FigError::NonFinite {
            context: "roc_auc scores".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FigError::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // average 1-based rank within each tie group
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Fraction of positions where the predicted class equals the true class.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(FigError::Argument(format!(
            "accuracy needs equal nonempty inputs, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// `(rmse, mae)` of `preds − targets`.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(FigError::Argument(format!(
            "regression metrics need equal nonempty inputs, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let r = p - t;
        sq += r * r;
        abs += r.abs();
    }
    Ok(((sq / n).sqrt(), abs / n))
}
