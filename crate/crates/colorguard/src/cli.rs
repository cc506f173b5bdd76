//! The `colorguard` command-line entry point: corpus generation, manifest
//! building, training, evaluation, and prediction as batch subcommands.
//!
//! Exit codes: 0 success, 2 validation/precondition failure, 3 IO or runtime
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_manifest, generate_synthetic_corpus, split_manifest, DataError, DatasetManifest,
    COLORIZED_PER_NATURAL,
};
use crate::eval::{self, EvalError};
use crate::model::{build_ensemble, EnsembleSpec, ModelError, CACHE_ENV};
use crate::preprocess::{self, Batch, Pipeline, PipelineError, PreprocessConfig};
use crate::train::{
    load_checkpoint, save_checkpoint, train_with_observer, CheckpointError, TrainConfig,
    TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} images failed")]
    PartialPredict { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(e) => match e {
                DataError::Io { .. } | DataError::Image { .. } => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            },
            CliError::Pipeline(e) => match e {
                PipelineError::Decode { .. } => EXIT_RUNTIME,
                PipelineError::Data(inner) => CliError::Data(clone_data_code(inner)).exit_code(),
                _ => EXIT_VALIDATION,
            },
            CliError::Model(e) => match e {
                ModelError::WeightsUnavailable { .. } | ModelError::BackboneFile { .. } => {
                    EXIT_RUNTIME
                }
                _ => EXIT_VALIDATION,
            },
            CliError::Train(e) => match e {
                TrainError::NanLoss { .. } => EXIT_RUNTIME,
                TrainError::Pipeline(p) => {
                    CliError::Pipeline(clone_pipeline_code(p)).exit_code()
                }
                TrainError::Model(_) => EXIT_VALIDATION,
                _ => EXIT_VALIDATION,
            },
            CliError::Checkpoint(_) => EXIT_RUNTIME,
            CliError::Eval(e) => match e {
                EvalError::Io { .. } => EXIT_RUNTIME,
                EvalError::Pipeline(p) => CliError::Pipeline(clone_pipeline_code(p)).exit_code(),
                EvalError::Model(_) => EXIT_VALIDATION,
                _ => EXIT_VALIDATION,
            },
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Io { .. } | CliError::PartialPredict { .. } => EXIT_RUNTIME,
        }
    }
}

// Error enums hold sources that are not Clone; these rebuild just enough
// structure for exit-code classification.
fn clone_data_code(e: &DataError) -> DataError {
    match e {
        DataError::Io { path, .. } => DataError::Io {
            path: path.clone(),
            source: std::io::Error::other("classified"),
        },
        DataError::Image { path, .. } => DataError::Io {
            path: path.clone(),
            source: std::io::Error::other("classified"),
        },
        _ => DataError::InvalidArgument(String::new()),
    }
}

fn clone_pipeline_code(e: &PipelineError) -> PipelineError {
    match e {
        PipelineError::Decode { path, message } => PipelineError::Decode {
            path: path.clone(),
            message: message.clone(),
        },
        PipelineError::Data(inner) => PipelineError::Data(clone_data_code(inner)),
        _ => PipelineError::InvalidBatchSize(0),
    }
}

#[derive(Parser)]
#[command(
    name = "colorguard",
    version,
    about = "Build colorized-vs-natural image datasets, train the two-branch ensemble detector, and evaluate it",
    after_help = format!("Backbone weights for pretrained branches are read from ${CACHE_ENV} \
                          (default ~/.cache/colorguard).")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic natural+pseudo-colorized corpus and its manifest
    Synth(SynthArgs),
    /// Assemble a 1:3 manifest from a natural dir and three colorizer dirs
    Build(BuildArgs),
    /// Train an ensemble from a JSON run config
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more manifests
    Eval(EvalArgs),
    /// Classify individual images with a trained checkpoint
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of groups (1 natural + 3 colorized images each)
    #[arg(long)]
    groups: usize,
    /// Output directory for images and manifest.jsonl
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest name (default: synthetic-<groups>g)
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct BuildArgs {
    /// Directory of natural images
    #[arg(long)]
    natural: PathBuf,
    /// Colorizer directories as ID=DIR (repeat per colorizer)
    #[arg(long = "colorized", value_parser = parse_id_dir)]
    colorized: Vec<(String, PathBuf)>,
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accept corpora that do not follow the 1:3 protocol
    #[arg(long)]
    ratio_free: bool,
    /// Manifest output path (default: <name>.jsonl)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config (schema 1)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest file(s); first non-cross-dataset entry is the internal baseline
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Report output directory (default: <checkpoint>/reports)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the machine-readable report JSON to stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file(s) to classify
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Emit a JSON array instead of text lines
    #[arg(long)]
    json: bool,
}

fn parse_id_dir(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((id, dir)) if !id.is_empty() && !dir.is_empty() => {
            Ok((id.to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected ID=DIR, got '{s}'")),
    }
}

/// Top-level run config consumed by `colorguard train --config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Config schema version; must be 1.
    pub schema: u32,
    /// Global seed for model initialization.
    pub seed: u64,
    pub train_manifest: PathBuf,
    /// Held-out manifest; when absent the training manifest is split by
    /// `train_fraction` at group granularity.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_train_fraction() -> f64 {
    0.75
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema != 1 {
            return Err(format!("unsupported config schema {} (expected 1)", self.schema));
        }
        self.preprocess.validate().map_err(|e| e.to_string())?;
        self.ensemble.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.val_manifest.is_none() && !(self.train_fraction > 0.0 && self.train_fraction < 1.0)
        {
            return Err(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses argv, runs the selected command, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Build(args) => cmd_build(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut manifest = generate_synthetic_corpus(args.groups, &args.out, args.seed)?;
    if let Some(name) = args.name {
        manifest.name = name;
    }
    let path = args.out.join("manifest.jsonl");
    manifest.save(&path)?;
    let (natural, colorized) = manifest.class_counts();
    println!(
        "wrote {} images ({natural} natural, {colorized} colorized) and {}",
        manifest.len(),
        path.display()
    );
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<(), CliError> {
    let dirs: BTreeMap<String, PathBuf> = args.colorized.iter().cloned().collect();
    if dirs.len() != args.colorized.len() {
        return Err(CliError::Config("duplicate colorizer ids".into()));
    }
    if dirs.len() != COLORIZED_PER_NATURAL && !args.ratio_free {
        return Err(CliError::Config(format!(
            "the 1:{COLORIZED_PER_NATURAL} protocol requires exactly {COLORIZED_PER_NATURAL} \
             colorizer dirs, got {}; pass --ratio-free to accept",
            dirs.len()
        )));
    }
    let mut manifest = build_manifest(&args.natural, &dirs, &args.name, args.seed)?;
    if args.ratio_free {
        manifest.ratio_free = true;
    }
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", args.name)));
    manifest.save(&out)?;
    println!(
        "wrote manifest {} ({} records, {} groups, ratio {})",
        out.display(),
        manifest.len(),
        manifest.group_count(),
        manifest
            .ratio()
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "undefined".into())
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(CliError::Config)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io {
        path: cfg.output_dir.clone(),
        source: e,
    })?;

    let full = DatasetManifest::load(&cfg.train_manifest)?;
    let (train_m, val_m) = match &cfg.val_manifest {
        Some(path) => (full, DatasetManifest::load(path)?),
        None => split_manifest(&full, cfg.train_fraction, cfg.train.seed)?,
    };
    let trained_on = train_m.name.clone();
    println!(
        "training on {} ({} records), validating on {} ({} records)",
        train_m.name,
        train_m.len(),
        val_m.name,
        val_m.len()
    );
    if let Some(ratio) = train_m.ratio() {
        println!("realized train natural:colorized ratio {ratio:.4}");
    }
    if let Some(ratio) = val_m.ratio() {
        println!("realized val natural:colorized ratio {ratio:.4}");
    }

    let train_pipe = Pipeline::new(train_m, cfg.preprocess.clone(), cfg.train.batch_size)?;
    let val_pipe = Pipeline::new(val_m, cfg.preprocess.clone(), cfg.train.batch_size)?;
    let model = build_ensemble(&cfg.ensemble, cfg.seed)?;
    println!(
        "built {} (head input width {})",
        model.model_id(),
        model.head_input_width()
    );

    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let (model, records) = train_with_observer(model, &train_pipe, &val_pipe, &cfg.train, |r| {
        println!(
            "epoch {:>3}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4} ({:.1}s)",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.wall_time
        );
        let line = serde_json::to_string(r).expect("record serialization");
        let _ = writeln!(log, "{line}");
    })?;

    let ckpt_dir = cfg.output_dir.join("checkpoint");
    let metadata = save_checkpoint(
        &model,
        &records,
        Some(&cfg.train),
        &cfg.preprocess,
        Some(&trained_on),
        &ckpt_dir,
    )?;
    println!(
        "checkpoint saved to {} (best epoch {:?})",
        ckpt_dir.display(),
        metadata.best_epoch
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, metadata) = load_checkpoint(&args.checkpoint)?;
    let manifests: Vec<DatasetManifest> = args
        .manifests
        .iter()
        .map(|p| DatasetManifest::load(p))
        .collect::<Result<_, _>>()?;
    let batch_size = metadata.train.as_ref().map(|t| t.batch_size).unwrap_or(32);
    let reports = eval::evaluate(
        &model,
        &manifests,
        &metadata.preprocess,
        batch_size,
        metadata.trained_on.as_deref(),
    )?;

    let out_dir = args
        .out
        .unwrap_or_else(|| args.checkpoint.join("reports"));
    eval::write_reports(&reports, &out_dir)?;
    if args.json {
        let payload = serde_json::json!({
            "reports": reports,
            "hter_differences": eval::hter_differences(&reports),
        });
        println!("{}", serde_json::to_string_pretty(&payload).expect("report json"));
    } else {
        print!("{}", eval::render_report_text(&reports));
        println!("reports written to {}", out_dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    image: String,
    label: String,
    p_natural: f64,
    p_colorized: f64,
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let (model, metadata) = load_checkpoint(&args.checkpoint)?;
    let cfg = &metadata.preprocess;

    let mut outputs = Vec::new();
    let mut failures = 0usize;
    for path in &args.images {
        match predict_one(&model, cfg, path) {
            Ok(pred) => outputs.push(pred),
            Err(e) => {
                failures += 1;
                eprintln!("error: {path:?}: {e}", path = path.display());
            }
        }
    }

    if args.json {
        println!("{}", serde_json::to_string_pretty(&outputs).expect("prediction json"));
    } else {
        for p in &outputs {
            let confidence = p.p_natural.max(p.p_colorized);
            println!("{}\t{} p={confidence:.4}", p.image, p.label);
        }
    }
    if failures > 0 {
        return Err(CliError::PartialPredict {
            failed: failures,
            total: args.images.len(),
        });
    }
    Ok(())
}

fn predict_one(
    model: &crate::model::EnsembleModel,
    cfg: &PreprocessConfig,
    path: &Path,
) -> Result<Prediction, CliError> {
    let decoded = image::open(path).map_err(|e| {
        CliError::Pipeline(PipelineError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let rgb = decoded.to_rgb8();
    let resized = preprocess::resize(&rgb, cfg);
    let normalized = preprocess::normalize(&resized, cfg);
    let (h, w) = (cfg.target_height, cfg.target_width);
    let pixels = Array4::from_shape_vec((1, h, w, 3), normalized.into_raw_vec_and_offset().0)
        .expect("sized pixels");
    let batch = Batch {
        pixels,
        labels: vec![0],
    };
    let probs = model.probabilities(&batch)?;
    let (p_natural, p_colorized) = (probs[[0, 0]] as f64, probs[[0, 1]] as f64);
    Ok(Prediction {
        image: path.display().to_string(),
        label: if p_colorized > p_natural {
            "colorized".into()
        } else {
            "natural".into()
        },
        p_natural,
        p_colorized,
    })
}
