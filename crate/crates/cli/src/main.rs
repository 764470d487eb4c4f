//! Single executable driving the full pipeline: synthetic data generation,
//! cross-supervised pre-training, fine-tuning, evaluation and CAM export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! divergence, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use refers_core::config::ExperimentConfig;
use refers_core::data::{self, Finding, GenConfig};
use refers_core::error::{Error, Result};
use refers_core::eval::{boxes_from_cam, draw_boxes, emit_report, MetricsRecord};
use refers_core::train::{self, RunOptions};

#[derive(Parser)]
#[command(
    name = "refers",
    about = "Cross-supervised radiograph representation learning on synthetic studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic study/report/label corpus
    GenData(GenDataArgs),
    /// Pre-train with report generation + contrastive alignment
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on the target corpus and evaluate AUC
    Finetune(FinetuneArgs),
    /// Aggregate fine-tuning runs into a metrics CSV with p-values
    Eval(EvalArgs),
    /// Export a class activation map overlay with predicted lesion boxes
    Cam(CamArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output corpus directory
    #[arg(long)]
    out: PathBuf,
    /// Number of studies
    #[arg(long)]
    n: usize,
    /// Generator seed
    #[arg(long)]
    seed: u64,
    /// Canonical stored image side (models consume size − 32)
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// Experiment configuration file (TOML, flat dotted keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for checkpoints, loss history and the vocabulary
    #[arg(long)]
    out: PathBuf,
    /// Continue from a last.bin of an identically configured run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override single config keys, e.g. --set train.seed=7 (flags win)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-training checkpoint to start from (omit for --ablation scratch)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fraction of the target training split to use
    #[arg(long, default_value_t = 1.0)]
    label_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run variant
    #[arg(long, default_value = "none")]
    ablation: Ablation,
    /// Run directory for the fine-tuned checkpoint and metrics
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum Ablation {
    None,
    NoRecconcat,
    NoViewfusion,
    Task1Only,
    Task2Only,
    Lsp,
    Scratch,
}

impl Ablation {
    fn method_name(self) -> &'static str {
        match self {
            Ablation::None => "refers",
            Ablation::NoRecconcat => "no-recconcat",
            Ablation::NoViewfusion => "no-viewfusion",
            Ablation::Task1Only => "task1-only",
            Ablation::Task2Only => "task2-only",
            Ablation::Lsp => "lsp",
            Ablation::Scratch => "scratch",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding the fine-tuning runs to report (metrics.json files)
    #[arg(long)]
    run_dir: PathBuf,
    /// Directory holding the baseline runs for the p-value column
    #[arg(long)]
    baseline_dir: PathBuf,
}

#[derive(Args)]
struct CamArgs {
    /// Fine-tuned checkpoint (finetune.bin)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input P5 graymap (canonical or already-cropped size)
    #[arg(long)]
    image: PathBuf,
    /// Class name (e.g. disk-left) or index
    #[arg(long)]
    class: String,
    /// Confidence threshold for box extraction
    #[arg(long, default_value_t = 0.6)]
    threshold: f32,
    /// Output overlay path (P5 graymap with box perimeters at 255)
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config_key_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Every configuration key with its default, appended to `--help`.
fn config_key_help() -> String {
    let mut out = String::from("Configuration keys (defaults in brackets):\n");
    for (key, default, doc) in ExperimentConfig::default().entries() {
        out.push_str(&format!("  {key:<24} {doc} [{default}]\n"));
    }
    out
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {pair:?} is not KEY=VALUE"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let gen = GenConfig { n_studies: args.n, canonical_size: args.size };
            let studies = data::generate_corpus(&gen, args.seed)?;
            let manifest = data::write_corpus(&studies, &args.out)?;
            println!(
                "wrote {} studies ({} train / {} val / {} test) to {}",
                manifest.records.len(),
                manifest.split(data::SPLIT_TRAIN).len(),
                manifest.split(data::SPLIT_VAL).len(),
                manifest.split(data::SPLIT_TEST).len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Pretrain(args) => {
            let cfg = load_config(&args.config, &args.set)?;
            let opts = RunOptions { resume_from: args.resume, session_iters: None };
            let outcome = train::pretrain(&cfg, Path::new(&cfg.data_dir), &args.out, &opts)?;
            println!(
                "pre-training done: {} iterations, best validation loss {:.6} at iteration {}",
                outcome.completed_iters, outcome.best_val_loss, outcome.best_iteration
            );
            println!("best checkpoint: {}", outcome.checkpoint_path.display());
            Ok(())
        }
        Command::Finetune(args) => {
            let mut cfg = load_config(&args.config, &args.set)?;
            if args.ablation == Ablation::NoRecconcat {
                cfg.rec_concat = false;
            }
            let checkpoint = match (args.ablation, &args.checkpoint) {
                (Ablation::Scratch, Some(_)) => {
                    return Err(Error::Config(
                        "--ablation scratch trains from random init; drop --checkpoint".into(),
                    ))
                }
                (Ablation::Scratch, None) => None,
                (_, ckpt) => ckpt.as_deref(),
            };
            let outcome = train::finetune(
                &cfg,
                Path::new(&cfg.target_dir),
                &args.out,
                checkpoint,
                args.label_ratio,
                args.seed,
                args.ablation.method_name(),
            )?;
            println!(
                "fine-tuning done: mean AUC {:.4} (per-class {})",
                outcome.metrics.mean_auc,
                outcome
                    .metrics
                    .per_class_auc
                    .iter()
                    .map(|a| format!("{a:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            println!("metrics: {}", args.out.join(train::METRICS_FILE).display());
            Ok(())
        }
        Command::Eval(args) => {
            let mut records = collect_metrics(&args.run_dir)?;
            let baseline = collect_metrics(&args.baseline_dir)?;
            let baseline_method = baseline
                .first()
                .map(|r| r.method.clone())
                .ok_or_else(|| Error::Data("baseline directory holds no metrics".into()))?;
            records.extend(baseline);
            let out_path = args.run_dir.join("metrics.csv");
            emit_report(&records, &baseline_method, &out_path)?;
            println!("wrote {}", out_path.display());
            Ok(())
        }
        Command::Cam(args) => {
            let model = train::load_finetuned(&args.checkpoint)?;
            let class = Finding::from_name(&args.class)
                .map(|f| f.index())
                .or_else(|| args.class.parse().ok())
                .ok_or_else(|| Error::Config(format!("unknown class {:?}", args.class)))?;
            let img = data::read_pgm(&args.image)?;
            let img = if img.size == model.cfg.image_size {
                img
            } else if img.size == model.cfg.canonical_size() {
                data::apply_image(&img, &data::AugmentParams::identity())?
            } else {
                return Err(Error::Data(format!(
                    "image side {} matches neither the model input {} nor the canonical {}",
                    img.size,
                    model.cfg.image_size,
                    model.cfg.canonical_size()
                )));
            };
            let weight = model.class_weight(class)?;
            let heatmap = model.encoder.cam(&img, &weight)?;
            let boxes = boxes_from_cam(&heatmap, args.threshold)?;
            for b in &boxes {
                println!("box {} {} {} {}", b.x0, b.y0, b.x1, b.y1);
            }
            data::write_pgm(&draw_boxes(&img, &boxes), &args.out)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
    }
}

/// Gather metrics.json files from a run directory and its direct children.
fn collect_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let direct = dir.join(train::METRICS_FILE);
    if direct.exists() {
        out.push(MetricsRecord::load(&direct)?);
    }
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read run dir {}: {e}", dir.display())))?;
    let mut children: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        let path = child.join(train::METRICS_FILE);
        if path.exists() {
            out.push(MetricsRecord::load(&path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no {} files under {}",
            train::METRICS_FILE,
            dir.display()
        )));
    }
    Ok(out)
}
