use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsnorm::aggregation::AggregationMethod;
use dsnorm::data::{generate_synthetic, split_loso, write_dataset, SyntheticConfig};
use dsnorm::harness::{
    assemble_report, emit_report, evaluate_fold, fold_seed, load_model, render_table, run_loso_on,
    save_model, train_fold, DataSource, ExperimentConfig, LosoReport,
};
use dsnorm::models::Variant;
use dsnorm::normlayers::NormKind;
use dsnorm::{Error, Result};

#[derive(Parser)]
#[command(name = "dsnorm", version, about = "Domain-specific normalization experiments on multi-subject EEG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain dataset and its manifest.
    Synth(SynthArgs),
    /// Train and evaluate a single leave-one-subject-out fold.
    Train(TrainArgs),
    /// Run the full leave-one-subject-out protocol.
    Loso(RunArgs),
    /// Evaluate a saved model on subjects it was not trained on.
    Eval(EvalArgs),
    /// Re-render reports from a results.json file.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the full defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    model: Option<Variant>,
    #[arg(long)]
    norm: Option<NormKind>,
    /// Comma-separated inference methods, e.g. avg_prob,select_wasserstein.
    #[arg(long, value_delimiter = ',')]
    agg: Option<Vec<AggregationMethod>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset manifest; overrides the config's data source.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None if self.desk => ExperimentConfig::desk(),
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.model {
            if cfg.model != m && cfg.architecture.widths.is_some() {
                cfg.architecture.widths = None;
            }
            cfg.model = m;
        }
        if let Some(n) = self.norm {
            cfg.norm = n;
        }
        if let Some(a) = &self.agg {
            cfg.aggregation = a.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(m) = &self.manifest {
            cfg.data = DataSource::Manifest(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Config whose `[data.synthetic]` table describes the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Held-out subject; defaults to the first subject id.
    #[arg(long)]
    holdout: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate only this subject (default: every subject unseen by the model).
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// results.json from an earlier run.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn finish(report: &LosoReport, dir: &Path) -> Result<()> {
    let files = emit_report(report, dir)?;
    print!("{}", render_table(report));
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut syn = match &args.config {
        Some(p) => match ExperimentConfig::load(p)?.data {
            DataSource::Synthetic(s) => s,
            DataSource::Manifest(_) => {
                return Err(Error::Configuration(
                    "synth needs a [data.synthetic] table, config names a manifest".into(),
                ))
            }
        },
        None => SyntheticConfig::default(),
    };
    if let Some(s) = args.seed {
        syn.seed = s;
    }
    let (data, truth) = generate_synthetic(&syn)?;
    let manifest = write_dataset(&data, &args.out)?;
    let gt = args.out.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&(syn, truth))
        .map_err(|e| Error::Format(format!("ground truth: {e}")))?;
    fs::write(&gt, json + "\n").map_err(|e| Error::Io { path: gt.clone(), source: e })?;
    println!("{}", manifest.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = cfg.data.load()?;
    let folds = split_loso(&data.samples)?;
    let k = match &args.holdout {
        Some(id) => folds
            .iter()
            .position(|f| &f.held_out == id)
            .ok_or_else(|| Error::Split(format!("no subject '{id}' in the dataset")))?,
        None => 0,
    };
    let fold = &folds[k];
    let wrap = |e: Error| Error::Fold {
        subject: fold.held_out.clone(),
        source: Box::new(e),
    };
    let trained = train_fold(&fold.train, &cfg, fold_seed(cfg.seed, k)).map_err(wrap)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
        path: cfg.output_dir.clone(),
        source: e,
    })?;
    save_model(&trained.model, &cfg.output_dir.join("model.dsnm"))?;
    let methods = cfg.inference_methods()?;
    let result = evaluate_fold(&trained.model, &fold.test, &methods, &fold.held_out, trained.loss_curve)
        .map_err(wrap)?;
    finish(&assemble_report(&cfg, &data, vec![result], &methods), &cfg.output_dir)
}

fn loso(args: &RunArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = cfg.data.load()?;
    let report = run_loso_on(&data, &cfg)?;
    finish(&report, &cfg.output_dir)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let model = load_model(&args.checkpoint)?;
    cfg.model = model.config.variant;
    cfg.norm = model.norm_kind();
    cfg.architecture.widths = Some(model.config.block_configs.iter().map(|b| b.out_channels).collect());
    let methods = cfg.inference_methods()?;
    let data = cfg.data.load()?;
    let subjects: Vec<String> = match &args.subject {
        Some(s) => vec![s.clone()],
        None => data
            .subjects()
            .into_iter()
            .filter(|s| !model.domains().contains(s))
            .collect(),
    };
    let mut results = Vec::new();
    for id in subjects {
        let test: Vec<_> = data.samples.iter().filter(|s| s.subject == id).collect();
        if test.is_empty() {
            return Err(Error::Split(format!("no samples for subject '{id}'")));
        }
        results.push(evaluate_fold(&model, &test, &methods, &id, Vec::new())?);
    }
    finish(&assemble_report(&cfg, &data, results, &methods), &cfg.output_dir)
}

fn report(args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::Io {
        path: args.input.clone(),
        source: e,
    })?;
    let report: LosoReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("results: {e}")))?;
    finish(&report, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Loso(a) => loso(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
