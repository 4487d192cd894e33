use serde::{Deserialize, Serialize};

use crate::data::ALERT;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Binary metrics with `alert` as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub confusion: Confusion,
    pub positive_class: String,
    /// Metrics reported as 0 because they are undefined on this input.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn auroc_defined(&self) -> bool {
        !self.flags.iter().any(|f| f == "auroc")
    }
}

fn ratio(num: usize, den: usize, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `scores` are probabilities of the positive class.
pub fn compute_metrics(scores: &[f64], predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Contract("no samples to score".into()));
    }
    if scores.len() != labels.len() || predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores, {} predictions, {} labels",
            scores.len(),
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::Contract(format!("non-binary class (prediction {p}, label {l})")));
        }
        match (p == ALERT, l == ALERT) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let mut flags = Vec::new();
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut flags);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut flags);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.push("f1".into());
        0.0
    };
    let auroc = match compute_auroc(scores, labels) {
        Ok(a) => a,
        Err(Error::UndefinedMetric(_)) => {
            flags.push("auroc".into());
            0.0
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        auroc,
        confusion: c,
        positive_class: "alert".into(),
        flags,
    })
}

/// Fraction of positive/negative pairs ranked correctly, ties counting one
/// half.
pub fn compute_auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == ALERT).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes among the labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney statistic, kept in integers.
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == ALERT {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}
