use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use super::report::{fold_means, MeanMetrics};
use super::ExperimentConfig;
use crate::aggregation::{aggregate, argmax, predict_with_selection, AggregationMethod, BranchOutputs};
use crate::data::{split_loso, Dataset, EegSample, ALERT};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, Route};
use crate::numcore::{softmax_last_axis, Adam, Tensor};

const EVAL_BATCH: usize = 64;

/// How predictions are formed at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    /// Single forward pass with shared statistics (domain-invariant norms).
    Plain,
    Aggregate(AggregationMethod),
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Plain => "plain",
            Inference::Aggregate(m) => m.name(),
        }
    }
}

impl fmt::Display for Inference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: Model,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Seed of fold `k`, derived from the run seed.
pub fn fold_seed(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng.next_u64()
}

fn batch_tensor(samples: &[&EegSample]) -> Result<Tensor> {
    let views: Vec<&Tensor> = samples.iter().map(|s| &s.signal).collect();
    Tensor::stack(&views)
}

/// Index batches for one epoch. Domain-invariant norms shuffle the whole
/// training set; domain-specific norms shuffle within each domain and visit
/// the domains round-robin, one domain per batch.
fn epoch_batches(
    groups: &[Vec<usize>],
    pooled: &[usize],
    domain_specific: bool,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    if !domain_specific {
        let mut order = pooled.to_vec();
        order.shuffle(rng);
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let per_domain: Vec<Vec<Vec<usize>>> = groups
        .iter()
        .map(|g| {
            let mut order = g.clone();
            order.shuffle(rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let rounds = per_domain.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for d in &per_domain {
            if let Some(b) = d.get(r) {
                out.push(b.clone());
            }
        }
    }
    out
}

/// Sorted training subject ids and the sample indices of each.
fn index_groups(train: &[&EegSample]) -> (Vec<String>, Vec<Vec<usize>>) {
    let domains: Vec<String> = train
        .iter()
        .map(|s| s.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let groups = domains
        .iter()
        .map(|d| (0..train.len()).filter(|&i| &train[i].subject == d).collect())
        .collect();
    (domains, groups)
}


/// Trains a fresh model on `train`; the bank branches follow the sorted
/// training subject ids.
pub fn train_fold(train: &[&EegSample], config: &ExperimentConfig, seed: u64) -> Result<TrainedFold> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Configuration("empty training set".into()))?;
    let shape = first.signal.shape().to_vec();
    if let Some(s) = train.iter().find(|s| s.signal.shape() != shape) {
        return Err(Error::Dimension(format!(
            "sample of '{}' has shape {:?}, expected {shape:?}",
            s.subject,
            s.signal.shape()
        )));
    }
    let (domains, groups) = index_groups(train);
    let pooled: Vec<usize> = (0..train.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model_cfg = config.model_config(shape[0], domains.len());
    let mut model = build_model(&model_cfg, &domains, rng.next_u64())?;
    let mut opt = Adam::new(config.optimizer);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let batches = epoch_batches(
            &groups,
            &pooled,
            model.is_domain_specific(),
            config.batch_size,
            &mut rng,
        );
        let mut total = 0.0;
        for b in &batches {
            let samples: Vec<&EegSample> = b.iter().map(|&i| train[i]).collect();
            let x = batch_tensor(&samples)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let ids: Vec<&str> = samples.iter().map(|s| s.subject.as_str()).collect();
            total += model.train_step(&x, &labels, &ids, &mut opt, &mut rng)?;
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Contract(format!("training loss diverged to {mean}")));
        }
        loss_curve.push(mean);
    }
    Ok(TrainedFold { model, loss_curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub metrics: MetricsReport,
    /// `[layer][branch]` selection counts, for selection methods.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection_histogram: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out: String,
    pub test_samples: usize,
    pub train_domains: Vec<String>,
    pub loss_curve: Vec<f64>,
    pub methods: Vec<MethodResult>,
}

/// Errors if any test subject is one of the model's source domains.
fn check_leakage(model: &Model, test: &[&EegSample]) -> Result<()> {
    let test_ids: BTreeSet<&str> = test.iter().map(|s| s.subject.as_str()).collect();
    for id in &test_ids {
        if model.domains().iter().any(|d| d == id) {
            return Err(Error::Leakage(format!("test subject '{id}' is a training domain")));
        }
        for layer in model.norm_layers() {
            if layer.bank().is_some_and(|b| b.contains_domain(id)) {
                return Err(Error::Leakage(format!(
                    "test subject '{id}' owns a normalization branch"
                )));
            }
        }
    }
    Ok(())
}

fn batched_logits(model: &Model, test: &[&EegSample], route: Route<'_>) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let logits = model.logits(&batch_tensor(chunk)?, route)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Evaluates a trained model on samples of unseen subjects.
pub fn evaluate_fold(
    model: &Model,
    test: &[&EegSample],
    methods: &[Inference],
    held_out: &str,
    loss_curve: Vec<f64>,
) -> Result<FoldResult> {
    check_leakage(model, test)?;
    if test.is_empty() {
        return Err(Error::Contract(format!("no test samples for '{held_out}'")));
    }
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let mut branch_logits: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut histogram = Vec::new();
        let (scores, preds): (Vec<f64>, Vec<usize>) = match method {
            Inference::Plain => {
                if model.is_domain_specific() {
                    return Err(Error::Configuration(
                        "domain-specific models need an aggregation method".into(),
                    ));
                }
                batched_logits(model, test, Route::Shared)?
                    .into_iter()
                    .map(|l| {
                        let p = softmax_last_axis(&Tensor::from_vec(l)).into_data();
                        (p[ALERT], argmax(&p))
                    })
                    .unzip()
            }
            Inference::Aggregate(m) => match m.metric() {
                Some(metric) => {
                    let layers = model.config.norm_layer_count();
                    histogram = vec![vec![0; model.num_branches()]; layers];
                    let mut pairs = Vec::with_capacity(test.len());
                    for s in test {
                        let x = s.signal.reshape([&[1], s.signal.shape()].concat())?;
                        let sel = predict_with_selection(model, &x, metric)?;
                        for (layer, &b) in sel.choices.iter().enumerate() {
                            histogram[layer][b] += 1;
                        }
                        pairs.push((sel.probs[ALERT], sel.class));
                    }
                    pairs.into_iter().unzip()
                }
                None => {
                    if branch_logits.is_none() {
                        let per_branch = (0..model.num_branches())
                            .map(|i| batched_logits(model, test, Route::Branch(i)))
                            .collect::<Result<Vec<_>>>()?;
                        branch_logits = Some(per_branch);
                    }
                    let per_branch = branch_logits.as_ref().expect("filled above");
                    let mut pairs = Vec::with_capacity(test.len());
                    for j in 0..test.len() {
                        let rows = per_branch.iter().map(|b| b[j].clone()).collect();
                        let a = aggregate(&BranchOutputs::from_logits(rows)?, m)?;
                        pairs.push((a.scores[ALERT], a.class));
                    }
                    pairs.into_iter().unzip()
                }
            },
        };
        results.push(MethodResult {
            method: method.name().to_string(),
            metrics: compute_metrics(&scores, &preds, &labels)?,
            selection_histogram: histogram,
        });
    }
    Ok(FoldResult {
        held_out: held_out.to_string(),
        test_samples: test.len(),
        train_domains: model.domains().to_vec(),
        loss_curve,
        methods: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub drowsy_samples: usize,
    pub alert_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub folds: Vec<FoldResult>,
    pub mean: Vec<MeanMetrics>,
    pub notes: Vec<String>,
}

/// Full leave-one-subject-out protocol on the configured data source.
pub fn run_loso(config: &ExperimentConfig) -> Result<LosoReport> {
    let data = config.data.load()?;
    run_loso_on(&data, config)
}

pub fn run_loso_on(data: &Dataset, config: &ExperimentConfig) -> Result<LosoReport> {
    config.validate()?;
    let methods = config.inference_methods()?;
    let folds = split_loso(&data.samples)?;
    let results: Vec<FoldResult> = folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let run = || -> Result<FoldResult> {
                if fold.train.iter().any(|s| s.subject == fold.held_out) {
                    return Err(Error::Leakage(format!(
                        "held-out subject '{}' present in training data",
                        fold.held_out
                    )));
                }
                let trained = train_fold(&fold.train, config, fold_seed(config.seed, k))?;
                evaluate_fold(&trained.model, &fold.test, &methods, &fold.held_out, trained.loss_curve)
            };
            run().map_err(|e| Error::Fold {
                subject: fold.held_out.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(assemble_report(config, data, results, &methods))
}

/// Wraps finished folds into a report with fold means and notes.
pub fn assemble_report(
    config: &ExperimentConfig,
    data: &Dataset,
    folds: Vec<FoldResult>,
    methods: &[Inference],
) -> LosoReport {
    let [drowsy, alert] = data.class_counts();
    let mut notes = config.substitution_notes();
    if folds
        .iter()
        .flat_map(|f| &f.methods)
        .any(|m| !m.metrics.auroc_defined())
    {
        notes.push("AUROC undefined on single-class folds; those folds are left out of its mean".into());
    }
    let names: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    LosoReport {
        config: config.clone(),
        dataset: DatasetSummary {
            subjects: data.subjects().len(),
            channels: data.channels,
            timesteps: data.timesteps,
            drowsy_samples: drowsy,
            alert_samples: alert,
        },
        mean: fold_means(&names, &folds),
        folds,
        notes,
    }
}
