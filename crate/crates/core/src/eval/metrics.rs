//! Error rate, average precision and ROC AUC.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim("scores vs. truth", b, a));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("metrics need at least one example".into()));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// Fraction of positions where the predicted sign differs from the truth.
pub fn error_rate(predictions: &[i32], truth: &[i32]) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    let wrong = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| (**p > 0) != (**t > 0))
        .count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// Mean over positives of the precision at each positive's rank, ranking by
/// descending score with ties kept in input order.
pub fn average_precision(scores: &[f64], truth: &[i32]) -> Result<f64> {
    check_lengths(scores.len(), truth.len())?;
    check_scores(scores)?;
    let positives = truth.iter().filter(|&&t| t > 0).count();
    if positives == 0 {
        return Err(Error::InvalidArgument(
            "average precision is undefined without positive examples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] > 0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], truth: &[i32]) -> Result<f64> {
    check_lengths(scores.len(), truth.len())?;
    check_scores(scores)?;
    let positives = truth.iter().filter(|&&t| t > 0).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs at least one positive and one negative example".into(),
        ));
    }
    // Mann-Whitney U from midranks
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_positives = order[start..end].iter().filter(|&&i| truth[i] > 0).count();
        rank_sum += midrank * tied_positives as f64;
        start = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mean_ap(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("mean AP of an empty list".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: String,
    pub error_rate: f64,
    pub ap: f64,
    pub auc: f64,
}

/// Aggregate metrics; with a per-class breakdown the top-level values are
/// class means (so `ap` is the MAP).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    pub ap: f64,
    pub auc: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    /// Scores a single binary task.
    pub fn binary(scores: &[f64], predictions: &[i32], truth: &[i32]) -> Result<Self> {
        Ok(Self {
            error_rate: error_rate(predictions, truth)?,
            ap: average_precision(scores, truth)?,
            auc: auc(scores, truth)?,
            per_class: Vec::new(),
        })
    }

    /// Averages per-class reports.
    pub fn from_classes(per_class: Vec<ClassReport>) -> Result<Self> {
        let mean = |f: fn(&ClassReport) -> f64| -> Result<f64> {
            mean_ap(&per_class.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            error_rate: mean(|c| c.error_rate)?,
            ap: mean(|c| c.ap)?,
            auc: mean(|c| c.auc)?,
            per_class,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "error_rate={}", self.error_rate);
        let _ = writeln!(out, "ap={}", self.ap);
        let _ = writeln!(out, "auc={}", self.auc);
        for c in &self.per_class {
            let _ = writeln!(out, "class.{}.error_rate={}", c.class, c.error_rate);
            let _ = writeln!(out, "class.{}.ap={}", c.class, c.ap);
            let _ = writeln!(out, "class.{}.auc={}", c.class, c.auc);
        }
        out
    }
}
