//! Fairness gaps and ranking metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("evaluation slice is empty")]
    Empty,
    #[error("length mismatch: {predictions} predictions, {labels} labels, {attributes} attributes")]
    Length { predictions: usize, labels: usize, attributes: usize },
    #[error("attribute group {0} is empty")]
    EmptyGroup(u8),
    #[error("cell (group {group}, label {label}) is empty")]
    EmptyCell { group: u8, label: u8 },
    #[error("no positive labels")]
    NoPositives,
    #[error("only one class present")]
    SingleClass,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Predictions with their binary labels and attributes.
#[derive(Clone, Copy, Debug)]
pub struct EvalSlice<'a> {
    pub predictions: &'a [f64],
    pub labels: &'a [f64],
    pub attributes: &'a [f64],
}

impl<'a> EvalSlice<'a> {
    pub fn new(predictions: &'a [f64], labels: &'a [f64], attributes: &'a [f64]) -> Result<Self> {
        if predictions.len() != labels.len() || predictions.len() != attributes.len() {
            return Err(MetricError::Length {
                predictions: predictions.len(),
                labels: labels.len(),
                attributes: attributes.len(),
            });
        }
        if predictions.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(Self { predictions, labels, attributes })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

fn mean_where(s: &EvalSlice, f: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..s.len() {
        if f(i) {
            sum += s.predictions[i];
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn bit(v: f64) -> bool {
    v > 0.5
}

/// `|E[f | A=0] - E[f | A=1]|`.
pub fn delta_dp(s: &EvalSlice) -> Result<f64> {
    let m0 = mean_where(s, |i| !bit(s.attributes[i])).ok_or(MetricError::EmptyGroup(0))?;
    let m1 = mean_where(s, |i| bit(s.attributes[i])).ok_or(MetricError::EmptyGroup(1))?;
    Ok((m0 - m1).abs())
}

/// `sum over y of |E[f | A=0, Y=y] - E[f | A=1, Y=y]|`.
pub fn delta_eo(s: &EvalSlice) -> Result<f64> {
    let mut total = 0.0;
    for label in [0u8, 1] {
        let mut means = [0.0; 2];
        for group in [0u8, 1] {
            means[group as usize] = mean_where(s, |i| {
                bit(s.attributes[i]) == (group == 1) && bit(s.labels[i]) == (label == 1)
            })
            .ok_or(MetricError::EmptyCell { group, label })?;
        }
        total += (means[0] - means[1]).abs();
    }
    Ok(total)
}

/// Gap metric on hard decisions `f >= threshold`.
pub fn thresholded(s: &EvalSlice, threshold: f64, gap: fn(&EvalSlice) -> Result<f64>) -> Result<f64> {
    let hard: Vec<f64> = s.predictions.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect();
    gap(&EvalSlice { predictions: &hard, ..*s })
}

/// Ranking by descending prediction, ties kept in input order.
fn ranking(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

/// `sum_k (R_k - R_{k-1}) P_k` over the ranking.
pub fn average_precision(s: &EvalSlice) -> Result<f64> {
    let positives = s.labels.iter().filter(|&&y| bit(y)).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut ap) = (0usize, 0.0);
    for (k, &i) in ranking(s.predictions).iter().enumerate() {
        if bit(s.labels[i]) {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Mann-Whitney statistic with ties counted as one half.
pub fn auc_roc(s: &EvalSlice) -> Result<f64> {
    let n = s.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| s.predictions[a].total_cmp(&s.predictions[b]));
    let (mut pos, mut rank_sum) = (0usize, 0.0);
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && s.predictions[idx[e + 1]] == s.predictions[idx[k]] {
            e += 1;
        }
        // ranks k+1..=e+1 share their average
        let mid = (k + e + 2) as f64 / 2.0;
        for &i in &idx[k..=e] {
            if bit(s.labels[i]) {
                pos += 1;
                rank_sum += mid;
            }
        }
        k = e + 1;
    }
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub seed: u64,
}

/// Serializable list of metric values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    /// AP, AUC, both gaps and their thresholded variants, skipping metrics undefined on the slice.
    pub fn evaluate(s: &EvalSlice, split: &str, seed: u64) -> Self {
        let mut r = Self::default();
        let mut put = |name: &str, v: Result<f64>| {
            if let Ok(value) = v {
                r.entries.push(MetricEntry { metric: name.into(), value, split: split.into(), seed });
            }
        };
        put("ap", average_precision(s));
        put("auc", auc_roc(s));
        put("delta_dp", delta_dp(s));
        put("delta_eo", delta_eo(s));
        put("delta_dp_thresholded", thresholded(s, 0.5, delta_dp));
        put("delta_eo_thresholded", thresholded(s, 0.5, delta_eo));
        r
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.metric == metric).map(|e| e.value)
    }
}
