use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{FoldResult, LosoReport};
use crate::error::{Error, Result};

/// Unweighted mean over folds of one method's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub method: String,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc: f64,
    pub folds: usize,
    /// Folds contributing to the AUROC mean.
    pub auroc_folds: usize,
}

pub(crate) fn fold_means(methods: &[String], folds: &[FoldResult]) -> Vec<MeanMetrics> {
    methods
        .iter()
        .map(|name| {
            let rows: Vec<_> = folds
                .iter()
                .filter_map(|f| f.methods.iter().find(|m| &m.method == name))
                .map(|m| &m.metrics)
                .collect();
            let n = rows.len().max(1) as f64;
            let mean = |f: &dyn Fn(&super::MetricsReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let defined: Vec<f64> = rows.iter().filter(|r| r.auroc_defined()).map(|r| r.auroc).collect();
            MeanMetrics {
                method: name.clone(),
                accuracy: mean(&|r| r.accuracy),
                f1: mean(&|r| r.f1),
                precision: mean(&|r| r.precision),
                recall: mean(&|r| r.recall),
                auroc: if defined.is_empty() {
                    0.0
                } else {
                    defined.iter().sum::<f64>() / defined.len() as f64
                },
                folds: rows.len(),
                auroc_folds: defined.len(),
            }
        })
        .collect()
}

const HEADER: &str = "Accuracy  F1-score  Precision    Recall     AUROC";

fn pct(x: f64) -> String {
    format!("{:>8.2}", 100.0 * x)
}

fn metric_cells(acc: f64, f1: f64, p: f64, r: f64, auc: f64) -> String {
    format!("{}  {}  {}   {}  {}", pct(acc), pct(f1), pct(p), pct(r), pct(auc))
}

/// Human-readable table: fold means first, then every fold.
pub fn render_table(report: &LosoReport) -> String {
    let c = &report.config;
    let d = &report.dataset;
    let mut s = String::new();
    let _ = writeln!(s, "Leave-one-subject-out evaluation");
    let _ = writeln!(s, "model {}  norm {}  seed {}", c.model, c.norm, c.seed);
    let _ = writeln!(
        s,
        "data: {} subjects, {} channels x {} timesteps, {} drowsy / {} alert samples",
        d.subjects, d.channels, d.timesteps, d.drowsy_samples, d.alert_samples
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Mean over held-out subjects (%, unweighted)");
    let _ = writeln!(s, "{:<20}{HEADER}", "method");
    for m in &report.mean {
        let _ = writeln!(
            s,
            "{:<20}{}",
            m.method,
            metric_cells(m.accuracy, m.f1, m.precision, m.recall, m.auroc)
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Per fold (%)");
    let _ = writeln!(s, "{:<12}{:<20}{HEADER}", "subject", "method");
    for f in &report.folds {
        for m in &f.methods {
            let r = &m.metrics;
            let mut line = format!(
                "{:<12}{:<20}{}",
                f.held_out,
                m.method,
                metric_cells(r.accuracy, r.f1, r.precision, r.recall, r.auroc)
            );
            if !r.flags.is_empty() {
                let _ = write!(line, "  [undefined: {}]", r.flags.join(","));
            }
            let _ = writeln!(s, "{line}");
        }
    }
    let histograms: Vec<_> = report
        .folds
        .iter()
        .flat_map(|f| f.methods.iter().map(move |m| (f, m)))
        .filter(|(_, m)| !m.selection_histogram.is_empty())
        .collect();
    if !histograms.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Branch selection counts (per layer, branches in training-domain order)");
        for (f, m) in histograms {
            let _ = writeln!(s, "{} {} [{}]", f.held_out, m.method, f.train_domains.join(" "));
            for (layer, counts) in m.selection_histogram.iter().enumerate() {
                let cells: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(s, "  layer {layer:>2}: {}", cells.join(" "));
            }
        }
    }
    if !report.notes.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Notes");
        for n in &report.notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

/// One row per (fold, method) plus one `mean` row per method.
pub fn render_csv(report: &LosoReport) -> String {
    let mut s = String::from("subject,method,accuracy,f1,precision,recall,auroc,tp,fp,tn,fn,flags\n");
    for f in &report.folds {
        for m in &f.methods {
            let r = &m.metrics;
            let c = &r.confusion;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                f.held_out,
                m.method,
                r.accuracy,
                r.f1,
                r.precision,
                r.recall,
                r.auroc,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                r.flags.join(";")
            );
        }
    }
    for m in &report.mean {
        let _ = writeln!(
            s,
            "mean,{},{},{},{},{},{},,,,,",
            m.method, m.accuracy, m.f1, m.precision, m.recall, m.auroc
        );
    }
    s
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes `report.txt`, `rows.csv`, `results.json` and `config.toml`.
pub fn emit_report(report: &LosoReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("results: {e}")))?;
    Ok(vec![
        write(dir.join("report.txt"), &render_table(report))?,
        write(dir.join("rows.csv"), &render_csv(report))?,
        write(dir.join("results.json"), &(json + "\n"))?,
        write(dir.join("config.toml"), &report.config.to_toml()?)?,
    ])
}
