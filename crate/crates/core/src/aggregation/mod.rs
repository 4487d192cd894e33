//! Inference over a bank of domain-specific branches: combine the outputs of
//! every branch, or pick one branch per normalization layer by comparing the
//! incoming instance statistics with each branch's stored statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, NoRng, Route};
use crate::normlayers::{BranchSelector, InstanceStats};
use crate::numcore::{softmax_last_axis, Tensor};

/// Stored per-channel statistics of one branch, `std = sqrt(running_var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-branch logits for one instance together with their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let t = Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty logits");
    softmax_last_axis(&t).into_data()
}

impl BranchOutputs {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        let c = match logits.first() {
            Some(v) if !v.is_empty() => v.len(),
            Some(_) => return Err(Error::Contract("empty logit vector".into())),
            None => return Err(Error::Contract("no branch outputs to aggregate".into())),
        };
        if let Some(v) = logits.iter().find(|v| v.len() != c) {
            return Err(Error::Dimension(format!(
                "branch logits disagree in length: {c} vs {}",
                v.len()
            )));
        }
        if logits.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Contract("non-finite branch logits".into()));
        }
        let probs = logits.iter().map(|v| softmax(v)).collect();
        Ok(BranchOutputs { logits, probs })
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn num_branches(&self) -> usize {
        self.logits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.logits[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    MaxLogit,
    MaxProb,
    AvgLogit,
    AvgProb,
    SelectWasserstein,
    SelectEuclidean,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 6] = [
        AggregationMethod::MaxLogit,
        AggregationMethod::MaxProb,
        AggregationMethod::AvgLogit,
        AggregationMethod::AvgProb,
        AggregationMethod::SelectWasserstein,
        AggregationMethod::SelectEuclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMethod::MaxLogit => "max_logit",
            AggregationMethod::MaxProb => "max_prob",
            AggregationMethod::AvgLogit => "avg_logit",
            AggregationMethod::AvgProb => "avg_prob",
            AggregationMethod::SelectWasserstein => "select_wasserstein",
            AggregationMethod::SelectEuclidean => "select_euclidean",
        }
    }

    /// Distance used by the selection methods, `None` for output combiners.
    pub fn metric(self) -> Option<DistanceMetric> {
        match self {
            AggregationMethod::SelectWasserstein => Some(DistanceMetric::Wasserstein),
            AggregationMethod::SelectEuclidean => Some(DistanceMetric::Euclidean),
            _ => None,
        }
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown aggregation method '{s}'")))
    }
}

/// Predicted class and the probability-like score vector used for metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub class: usize,
    pub scores: Vec<f64>,
}

/// Index of the first maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Branch holding the single largest entry; ties go to the lowest branch,
/// then the lowest class.
fn winning_branch(rows: &[Vec<f64>]) -> (usize, usize) {
    let (mut bi, mut bc) = (0, 0);
    for (i, r) in rows.iter().enumerate() {
        for (c, &x) in r.iter().enumerate() {
            if x > rows[bi][bc] {
                bi = i;
                bc = c;
            }
        }
    }
    (bi, bc)
}

/// Combines branch outputs. The max methods score with the winning branch's
/// probabilities; `AvgLogit` scores with the softmax of the mean logits.
pub fn aggregate(outputs: &BranchOutputs, method: AggregationMethod) -> Result<Aggregated> {
    match method {
        AggregationMethod::MaxLogit => {
            let (b, class) = winning_branch(&outputs.logits);
            Ok(Aggregated {
                class,
                scores: outputs.probs[b].clone(),
            })
        }
        AggregationMethod::MaxProb => {
            let (b, class) = winning_branch(&outputs.probs);
            Ok(Aggregated {
                class,
                scores: outputs.probs[b].clone(),
            })
        }
        AggregationMethod::AvgLogit => {
            let mean = mean_rows(&outputs.logits);
            Ok(Aggregated {
                class: argmax(&mean),
                scores: softmax(&mean),
            })
        }
        AggregationMethod::AvgProb => {
            let mean = mean_rows(&outputs.probs);
            Ok(Aggregated {
                class: argmax(&mean),
                scores: mean,
            })
        }
        AggregationMethod::SelectWasserstein | AggregationMethod::SelectEuclidean => {
            Err(Error::Configuration(format!(
                "{method} selects per layer during the forward pass; use predict_with_selection"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Wasserstein,
    Euclidean,
}

fn check_channels(z: &InstanceStats, b: &BranchStats) -> Result<()> {
    let c = z.mean.len();
    if z.std.len() != c || b.mean.len() != c || b.std.len() != c {
        return Err(Error::Dimension(format!(
            "statistics channel mismatch: instance {}/{}, branch {}/{}",
            z.mean.len(),
            z.std.len(),
            b.mean.len(),
            b.std.len()
        )));
    }
    Ok(())
}

/// Sum over channels of `|Δμ| + |Δσ|`: the 1-Wasserstein distance between
/// per-channel point masses.
pub fn branch_distance_wasserstein(z: &InstanceStats, b: &BranchStats) -> Result<f64> {
    check_channels(z, b)?;
    let dm: f64 = z.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs()).sum();
    let ds: f64 = z.std.iter().zip(&b.std).map(|(x, y)| (x - y).abs()).sum();
    Ok(dm + ds)
}

/// Sum over channels of `sqrt(Δμ² + Δσ²)`.
pub fn branch_distance_euclidean(z: &InstanceStats, b: &BranchStats) -> Result<f64> {
    check_channels(z, b)?;
    Ok(z.mean
        .iter()
        .zip(&z.std)
        .zip(b.mean.iter().zip(&b.std))
        .map(|((zm, zs), (bm, bs))| (zm - bm).hypot(zs - bs))
        .sum())
}

impl DistanceMetric {
    pub fn distance(self, z: &InstanceStats, b: &BranchStats) -> Result<f64> {
        match self {
            DistanceMetric::Wasserstein => branch_distance_wasserstein(z, b),
            DistanceMetric::Euclidean => branch_distance_euclidean(z, b),
        }
    }
}

impl BranchSelector for DistanceMetric {
    fn select(&self, z: &InstanceStats, candidates: &[BranchStats]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::Contract("no branches to select from".into()));
        }
        let mut best = (0, f64::INFINITY);
        for (i, b) in candidates.iter().enumerate() {
            let d = self.distance(z, b)?;
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub class: usize,
    pub probs: Vec<f64>,
    /// Branch chosen at every normalization layer, in execution order.
    pub choices: Vec<usize>,
}

/// One eval-mode pass over a single instance `[1, C, T]`, selecting the
/// closest branch at each normalization layer.
pub fn predict_with_selection(
    model: &Model,
    x: &Tensor,
    metric: DistanceMetric,
) -> Result<Selection> {
    if !model.is_domain_specific() {
        return Err(Error::Configuration(format!(
            "branch selection needs a domain-specific model, got {}",
            model.norm_kind()
        )));
    }
    let trace = model.forward(x, Route::Select(&metric), false, false, &mut NoRng)?;
    let probs = softmax(trace.logits.data());
    Ok(Selection {
        class: argmax(&probs),
        probs,
        choices: trace.branches,
    })
}
