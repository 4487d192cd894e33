//! Experiment driver: per-fold training and evaluation under
//! leave-one-subject-out, metrics, reports and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::data::{load_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{
    ModelConfig, Variant, DEFAULT_DROPOUT, DEFAULT_KERNEL_SIZE, DEFAULT_PADDING, DEFAULT_STRIDE,
};
use crate::normlayers::NormKind;
use crate::numcore::{AdamConfig, PadMode};

pub mod checkpoint;
mod metrics;
mod report;
mod run;

pub use checkpoint::{load_model, save_model};
pub use metrics::{compute_auroc, compute_metrics, Confusion, MetricsReport};
pub use report::{emit_report, render_csv, render_table, MeanMetrics};
pub use run::{
    assemble_report, evaluate_fold, fold_seed, run_loso, run_loso_on, train_fold, FoldResult, DatasetSummary, Inference,
    LosoReport, MethodResult, TrainedFold,
};

pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Output channels per residual block; `None` uses the variant defaults.
    pub widths: Option<Vec<usize>>,
    pub kernel_size: usize,
    pub stride: usize,
    pub dropout: f64,
    pub padding: PadMode,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            widths: None,
            kernel_size: DEFAULT_KERNEL_SIZE,
            stride: DEFAULT_STRIDE,
            dropout: DEFAULT_DROPOUT,
            padding: DEFAULT_PADDING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Path to a dataset manifest, relative to the config file when loaded
    /// from one.
    Manifest(PathBuf),
    Synthetic(SyntheticConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Manifest(p) => load_dataset(p),
            DataSource::Synthetic(cfg) => crate::data::generate_synthetic(cfg).map(|(d, _)| d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Variant,
    pub norm: NormKind,
    /// Inference methods for domain-specific models; empty selects every
    /// method the normalization supports.
    pub aggregation: Vec<AggregationMethod>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub architecture: ArchitectureConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: Variant::ResNet1D8,
            norm: NormKind::Dsbn,
            aggregation: Vec::new(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            optimizer: AdamConfig::default(),
            architecture: ArchitectureConfig::default(),
            data: DataSource::Synthetic(SyntheticConfig::default()),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Narrow network and short schedule for laptop-scale runs.
    pub fn desk() -> Self {
        ExperimentConfig {
            epochs: 8,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            architecture: ArchitectureConfig {
                widths: Some(vec![8, 16, 32]),
                kernel_size: 5,
                ..ArchitectureConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Configuration(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; a relative manifest path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Configuration("epochs and batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Configuration(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(w) = &self.architecture.widths {
            if w.len() != self.model.block_count() {
                return Err(Error::Configuration(format!(
                    "{} needs {} widths, got {}",
                    self.model,
                    self.model.block_count(),
                    w.len()
                )));
            }
        }
        self.inference_methods().map(|_| ())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.architecture
            .widths
            .clone()
            .unwrap_or_else(|| self.model.default_widths().to_vec())
    }

    pub fn model_config(&self, input_channels: usize, num_domains: usize) -> ModelConfig {
        let a = &self.architecture;
        let mut cfg = ModelConfig::with_widths(
            self.model,
            input_channels,
            &self.widths(),
            a.kernel_size,
            a.stride,
            a.dropout,
            self.norm,
            2,
            num_domains,
        );
        for b in &mut cfg.block_configs {
            b.padding_mode = a.padding;
        }
        cfg
    }

    /// Evaluation methods implied by the normalization kind and the
    /// requested aggregation list.
    pub fn inference_methods(&self) -> Result<Vec<Inference>> {
        if !self.norm.is_domain_specific() {
            return Ok(vec![Inference::Plain]);
        }
        let selectable = self.norm != NormKind::Dsin;
        if self.aggregation.is_empty() {
            return Ok(AggregationMethod::ALL
                .into_iter()
                .filter(|m| selectable || m.metric().is_none())
                .map(Inference::Aggregate)
                .collect());
        }
        let mut out = Vec::new();
        for &m in &self.aggregation {
            if m.metric().is_some() && !selectable {
                return Err(Error::Configuration(format!(
                    "{m} needs stored branch statistics, which DSIN does not keep"
                )));
            }
            let inf = Inference::Aggregate(m);
            if !out.contains(&inf) {
                out.push(inf);
            }
        }
        Ok(out)
    }

    /// Settings that stand in for values the method description leaves open.
    pub fn substitution_notes(&self) -> Vec<String> {
        let a = &self.architecture;
        vec![
            format!(
                "architecture: widths {:?}, kernel {}, stride {}, dropout {}, {:?} padding (substitute values)",
                self.widths(),
                a.kernel_size,
                a.stride,
                a.dropout,
                a.padding
            ),
            "residual block order: conv, norm, GELU, dropout, conv, norm, add skip, GELU (substitute)".into(),
            "head: global average pooling then one fully-connected layer (substitute)".into(),
            format!(
                "optimizer: Adam lr {}, betas ({}, {}), eps {} (substitute values)",
                self.optimizer.lr, self.optimizer.beta1, self.optimizer.beta2, self.optimizer.eps
            ),
            format!(
                "schedule: {} epochs, batch size {} (substitute values)",
                self.epochs, self.batch_size
            ),
            "batches: one domain per batch, round-robin over domains, for domain-specific norms".into(),
            "fold mean: unweighted over held-out subjects".into(),
        ]
    }
}

#[cfg(test)]
mod tests;
