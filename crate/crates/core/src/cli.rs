//! Command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 5 incompatible checkpoint.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{DataSource, RunConfig};
use crate::dataset::{self, canonical_hash, write_json};
use crate::inference::{InferenceError, Variant};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::pipeline::{self, Ablation, Data, PipelineError};
use crate::synthdata::Generator;
use crate::trainer::checkpoint::{self, CheckpointError};
use crate::trainer::{write_loss_csv, FinetuneMode, TrainError};

pub const THREADS_ENV: &str = "LATENTSET_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
            Self::Checkpoint(_) => 5,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<dataset::DataError> for CliError {
    fn from(e: dataset::DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            Self::Numerical(e.to_string())
        } else {
            Self::Data(e.to_string())
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Incompatible(m) => Self::Checkpoint(m),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "latentset", version, about = "Set-valued latent representations for partially observed multiview records")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the configured generator.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset file (JSON Lines); defaults to the configured source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Supervised fine-tuning of a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint prefix (without `.manifest.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// frozen, head-only or full; defaults to the configured mode.
        #[arg(long)]
        mode: Option<FinetuneMode>,
    },
    /// Metrics on the test split at one mask level.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fraction of modalities masked at test time.
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        /// distributional or deterministic.
        #[arg(long, default_value = "distributional")]
        variant: String,
    },
    /// Evaluation across all configured mask levels and both variants.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and one ablated variant with identical seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// consistency, distribution or contrastive.
        #[arg(long)]
        which: Ablation,
    },
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    match s {
        "distributional" => Ok(Variant::Distributional),
        "deterministic" => Ok(Variant::Deterministic),
        other => Err(CliError::Config(format!("unknown variant {other:?}"))),
    }
}

/// Validates the thread cap. Computation is single-threaded, so any valid
/// cap yields the same results.
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn ensure_writable(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::Data(format!(
                "{} already exists (pass --force to overwrite)",
                p.display()
            )));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn level_tag(level: f64) -> String {
    format!("l{}", (level * 100.0).round() as i64)
}

/// Writes reports as CSV rows sharing the union of their metric columns.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    let names: BTreeSet<&String> = reports.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "variant".to_string(),
        "mask_level".to_string(),
        "seed".to_string(),
        "mc_samples".to_string(),
        "config_hash".to_string(),
    ];
    header.extend(names.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.meta.variant.clone(),
            r.meta.mask_level.to_string(),
            r.meta.seed.to_string(),
            r.meta.mc_samples.to_string(),
            r.meta.config_hash.clone(),
        ];
        row.extend(
            names
                .iter()
                .map(|n| r.metrics.get(*n).map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(prefix: &Path, cfg: &RunConfig, data: &Data) -> Result<Model<f64>, CliError> {
    let (model, manifest) = checkpoint::load(prefix)?;
    checkpoint::check_compatible(&manifest, &cfg.model, &cfg.hash())?;
    if manifest.data_hash != data.data_hash {
        return Err(CliError::Checkpoint(format!(
            "data_hash: checkpoint {} vs data {}",
            manifest.data_hash, data.data_hash
        )));
    }
    Ok(model)
}

fn cmd_synth(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let spec = match &cfg.data {
        DataSource::Generator(spec) => spec,
        DataSource::Path(_) => {
            return Err(CliError::Config("synth needs data to be a generator spec".into()))
        }
    };
    let generator = Generator::new(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let records = generator.generate();
    let path = common.out.join("data.jsonl");
    ensure_writable(&[path.clone(), dataset::manifest_path(&path)], common.force)?;
    dataset::write_dataset(
        &path,
        &records,
        &spec.modality_dims,
        Some(spec.latent_dim),
        Some(canonical_hash(spec)),
        Some(cfg.hash()),
        true,
    )?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn cmd_pretrain(common: &Common, data_path: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let data = pipeline::load_data(&cfg, data_path)?;
    let out = &common.out;
    let final_prefix = out.join("pretrain.final");
    let best_prefix = out.join("pretrain.best");
    let loss_csv = out.join("pretrain_loss.csv");
    ensure_writable(
        &[
            checkpoint::manifest_path(&final_prefix),
            checkpoint::manifest_path(&best_prefix),
            loss_csv.clone(),
        ],
        common.force,
    )?;
    create_dir(out)?;
    let outcome = pipeline::pretrain(&cfg, &data)?;
    let hash = cfg.hash();
    checkpoint::save(&outcome.model, &final_prefix, &hash, &data.data_hash, outcome.steps)?;
    checkpoint::save(&outcome.best, &best_prefix, &hash, &data.data_hash, outcome.steps)?;
    write_loss_csv(&loss_csv, &outcome.log)?;
    let summary = serde_json::json!({
        "config_hash": hash,
        "data_hash": data.data_hash,
        "best_epoch": outcome.best_epoch,
        "steps": outcome.steps,
        "validation": outcome.validation,
    });
    write_json(&out.join("pretrain_summary.json"), &summary)?;
    println!(
        "pretrained {} steps; best epoch {}",
        outcome.steps, outcome.best_epoch
    );
    Ok(())
}

fn cmd_finetune(
    common: &Common,
    data_path: Option<&Path>,
    ckpt: &Path,
    mode: Option<FinetuneMode>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let data = pipeline::load_data(&cfg, data_path)?;
    let model = load_checkpoint(ckpt, &cfg, &data)?;
    let mode = mode.unwrap_or(cfg.finetune.mode);
    let tag = serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let prefix = common.out.join(format!("finetune_{tag}"));
    let loss_csv = common.out.join(format!("finetune_{tag}_loss.csv"));
    ensure_writable(&[checkpoint::manifest_path(&prefix), loss_csv.clone()], common.force)?;
    create_dir(&common.out)?;
    let outcome = pipeline::finetune(&cfg, model, &data, mode)?;
    checkpoint::save(&outcome.model, &prefix, &cfg.hash(), &data.data_hash, outcome.steps)?;
    write_loss_csv(&loss_csv, &outcome.log)?;
    println!(
        "fine-tuned ({tag}) {} steps; temperature {}",
        outcome.steps, outcome.model.temperature
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data_path: Option<&Path>,
    ckpt: &Path,
    level: f64,
    variant: Variant,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let data = pipeline::load_data(&cfg, data_path)?;
    let model = load_checkpoint(ckpt, &cfg, &data)?;
    let stem = common
        .out
        .join(format!("eval_{}_{}", variant.name(), level_tag(level)));
    let json = stem.with_extension("json");
    let csv_path = stem.with_extension("csv");
    ensure_writable(&[json.clone(), csv_path.clone()], common.force)?;
    create_dir(&common.out)?;
    let report = pipeline::evaluate_model(&cfg, &model, &data.test(), level, variant)?;
    write_json(&json, &report)?;
    write_reports_csv(&csv_path, std::slice::from_ref(&report))?;
    println!("wrote {}", json.display());
    Ok(())
}

/// One row per variant, one AUROC column per mask level.
fn write_sweep_table(path: &Path, levels: &[f64], reports: &[MetricsReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant".to_string()];
    header.extend(levels.iter().map(|&l| format!("auroc_{}", level_tag(l))));
    header.push("strictly_decreasing".into());
    w.write_record(&header)?;
    for variant in [Variant::Distributional, Variant::Deterministic] {
        let values: Vec<Option<f64>> = levels
            .iter()
            .map(|&l| {
                reports
                    .iter()
                    .find(|r| r.meta.variant == variant.name() && r.meta.mask_level == l)
                    .and_then(|r| r.get("auroc"))
            })
            .collect();
        let decreasing = values.windows(2).all(|p| match (p[0], p[1]) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        });
        let mut row = vec![variant.name().to_string()];
        row.extend(values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        row.push(decreasing.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(common: &Common, data_path: Option<&Path>, ckpt: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let data = pipeline::load_data(&cfg, data_path)?;
    let model = load_checkpoint(ckpt, &cfg, &data)?;
    let table = common.out.join("sweep.csv");
    let long = common.out.join("sweep_metrics.csv");
    ensure_writable(&[table.clone(), long.clone()], common.force)?;
    create_dir(&common.out)?;
    let test = data.test();
    let mut reports = Vec::new();
    let modalities = cfg.model.modality_dims.len();
    let levels: Vec<f64> = cfg
        .eval
        .mask_levels
        .iter()
        .copied()
        .filter(|&l| {
            let ok = crate::viewgen::sweep_masks(modalities, l).is_ok();
            if !ok {
                eprintln!("skipping mask level {l}: it would drop all {modalities} modalities");
            }
            ok
        })
        .collect();
    for variant in [Variant::Distributional, Variant::Deterministic] {
        for &level in &levels {
            reports.push(pipeline::evaluate_model(&cfg, &model, &test, level, variant)?);
        }
    }
    write_sweep_table(&table, &cfg.eval.mask_levels, &reports)?;
    write_reports_csv(&long, &reports)?;
    println!("wrote {}", table.display());
    Ok(())
}

fn cmd_ablate(common: &Common, data_path: Option<&Path>, which: Ablation) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let data = pipeline::load_data(&cfg, data_path)?;
    let stem = common.out.join(format!("ablate_{}", which.name()));
    let json = stem.with_extension("json");
    let csv_path = stem.with_extension("csv");
    ensure_writable(&[json.clone(), csv_path.clone()], common.force)?;
    create_dir(&common.out)?;
    let ablated_cfg = which.apply(&cfg);
    let test = data.test();
    let full = pipeline::train(&cfg, &data)?;
    let mut full_report =
        pipeline::evaluate_model(&cfg, full.model(), &test, 0.0, pipeline::native_variant(&cfg))?;
    full_report.meta.variant = "full".into();
    let ablated = pipeline::train(&ablated_cfg, &data)?;
    let mut ablated_report = pipeline::evaluate_model(
        &ablated_cfg,
        ablated.model(),
        &test,
        0.0,
        pipeline::native_variant(&ablated_cfg),
    )?;
    ablated_report.meta.variant = format!("without_{}", which.name());
    let reports = vec![full_report, ablated_report];
    write_reports_csv(&csv_path, &reports)?;
    write_json(&json, &reports)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    thread_cap()?;
    match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Pretrain { common, data } => cmd_pretrain(&common, data.as_deref()),
        Command::Finetune {
            common,
            data,
            checkpoint,
            mode,
        } => cmd_finetune(&common, data.as_deref(), &checkpoint, mode),
        Command::Eval {
            common,
            data,
            checkpoint,
            level,
            variant,
        } => cmd_eval(&common, data.as_deref(), &checkpoint, level, parse_variant(&variant)?),
        Command::Sweep {
            common,
            data,
            checkpoint,
        } => cmd_sweep(&common, data.as_deref(), &checkpoint),
        Command::Ablate {
            common,
            data,
            which,
        } => cmd_ablate(&common, data.as_deref(), which),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
