//! Ranking and regression metrics.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFiniteValue(*s));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    // walk from the lowest scores; each positive beats every negative seen so far
    let mut wins = 0.0;
    let mut neg_seen = 0usize;
    for g in tie_groups(scores).iter().rev() {
        let p = g.iter().filter(|&&i| labels[i]).count();
        let n = g.len() - p;
        wins += p as f64 * (neg_seen as f64 + 0.5 * n as f64);
        neg_seen += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve: `Σ (R_k − R_{k−1}) P_k` over
/// the distinct score thresholds, highest first.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut last_recall = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count();
        tp += p;
        fp += g.len() - p;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - last_recall) * precision;
        last_recall = recall;
    }
    Ok(area)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
