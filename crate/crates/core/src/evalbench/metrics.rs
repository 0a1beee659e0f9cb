use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ROC-AUC as the Mann-Whitney statistic: the fraction of (positive, negative)
/// pairs ranked correctly, ties counting one half. Computed in integers
/// (doubled ranks) so the result is the exact ratio.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count() as u128;
    let n_neg = scores.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFiniteValue("roc_auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // sum over positives of 2 * (1-based average rank)
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| scores[k].1).count() as u128;
        rank2_pos += doubled * pos_in_group;
        i = j + 1;
    }
    let u2 = rank2_pos - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Harmonic mean of run-averaged precision and run-averaged recall.
pub fn average_f1(precisions: &[f64], recalls: &[f64]) -> Result<f64> {
    if precisions.is_empty() || recalls.is_empty() {
        return Err(Error::EmptyList);
    }
    let p = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let r = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the scored set holds a single class.
    pub roc_auc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub average_f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub run_seed: u64,
    pub config_hash: String,
}

/// Metrics of `(probability, label)` pairs at `threshold`. Decisions are
/// `probability > threshold`. Precision is 0 when nothing is predicted
/// positive, recall 0 when nothing is positive.
pub fn compute_metrics(scores: &[(f64, bool)], threshold: f64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::EmptyList);
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for &(p, y) in scores {
        match (p > threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let roc = match roc_auc(scores) {
        Ok(v) => Some(v),
        Err(Error::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        roc_auc: roc,
        recall,
        precision,
        accuracy: ratio(tp + tn, scores.len()),
        average_f1: average_f1(&[precision], &[recall])?,
        n_pos: tp + fneg,
        n_neg: fp + tn,
        run_seed: 0,
        config_hash: String::new(),
    })
}

impl EvalReport {
    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let auc = self.roc_auc.map_or("absent".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "roc_auc={auc}");
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "average_f1={}", self.average_f1);
        let _ = writeln!(s, "n_pos={}", self.n_pos);
        let _ = writeln!(s, "n_neg={}", self.n_neg);
        let _ = writeln!(s, "run_seed={}", self.run_seed);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
