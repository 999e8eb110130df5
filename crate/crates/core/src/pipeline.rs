//! End-to-end stages driven by a [`RunConfig`]: load data, split, pretrain,
//! fine-tune, evaluate and ablate.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DataSource, RunConfig};
use crate::dataset::{canonical_hash, read_dataset, DataError, SplitIndices};
use crate::encoder::PatientRecord;
use crate::inference::{evaluate, EvalOptions, InferenceError, Variant};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::synthdata::{Generator, SynthError};
use crate::trainer::{self, FinetuneMode, FinetuneOutcome, PretrainOutcome, TrainError, TrainOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("dataset does not match the model: {0}")]
    Shape(String),
}

/// Records with their split and provenance hash.
#[derive(Debug, Clone)]
pub struct Data {
    pub records: Vec<PatientRecord>,
    /// Hash of the generator spec, or checksum of the dataset file.
    pub data_hash: String,
    pub generator: Option<Generator>,
    pub splits: SplitIndices,
}

impl Data {
    pub fn train(&self) -> Vec<PatientRecord> {
        SplitIndices::select(&self.records, &self.splits.train)
    }

    pub fn val(&self) -> Vec<PatientRecord> {
        SplitIndices::select(&self.records, &self.splits.val)
    }

    pub fn test(&self) -> Vec<PatientRecord> {
        SplitIndices::select(&self.records, &self.splits.test)
    }
}

/// Loads records from `path` if given, else from the configured source.
pub fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Data, PipelineError> {
    let (records, data_hash, generator) = match (path, &cfg.data) {
        (Some(p), _) => {
            let (records, manifest) = read_dataset(p)?;
            (records, manifest.data_sha256, None)
        }
        (None, DataSource::Path(p)) => {
            let (records, manifest) = read_dataset(p)?;
            (records, manifest.data_sha256, None)
        }
        (None, DataSource::Generator(spec)) => {
            let g = Generator::new(spec)?;
            (g.generate(), canonical_hash(spec), Some(g))
        }
    };
    for r in &records {
        let dims: Vec<usize> = r.modalities.iter().map(Vec::len).collect();
        if dims != cfg.model.modality_dims {
            return Err(PipelineError::Shape(format!(
                "record {} has modality dims {dims:?}, model expects {:?}",
                r.id, cfg.model.modality_dims
            )));
        }
    }
    // the split depends on the data, not on the training seed, so that
    // runs with different seeds share their test records
    let split_seed = match &cfg.data {
        DataSource::Generator(spec) => spec.seed,
        DataSource::Path(_) => 0,
    };
    let splits = SplitIndices::new(
        records.len(),
        cfg.splits.val_fraction,
        cfg.splits.test_fraction,
        split_seed,
    );
    Ok(Data {
        records,
        data_hash,
        generator,
        splits,
    })
}

pub fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        weights: cfg.weights.clone(),
        policy: cfg.policy.clone(),
        optim: cfg.optim.clone(),
        seed: cfg.seed,
    }
}

pub fn pretrain(cfg: &RunConfig, data: &Data) -> Result<PretrainOutcome<f64>, TrainError> {
    let init = Model::<f64>::init(&cfg.model, cfg.seed);
    trainer::pretrain(init, &data.train(), &data.val(), &train_options(cfg))
}

/// The labeled training records kept by `finetune.label_fraction`.
pub fn labeled_subset(cfg: &RunConfig, train: &[PatientRecord]) -> Vec<PatientRecord> {
    let labeled: Vec<PatientRecord> = train.iter().filter(|r| r.label.is_some()).cloned().collect();
    let keep = (cfg.finetune.label_fraction * labeled.len() as f64).ceil() as usize;
    labeled.into_iter().take(keep).collect()
}

pub fn finetune(
    cfg: &RunConfig,
    model: Model<f64>,
    data: &Data,
    mode: FinetuneMode,
) -> Result<FinetuneOutcome<f64>, TrainError> {
    let train = labeled_subset(cfg, &data.train());
    trainer::finetune(model, &train, &data.val(), mode, &train_options(cfg))
}

pub fn eval_options(cfg: &RunConfig, level: f64, variant: Variant) -> EvalOptions {
    EvalOptions {
        level,
        variant,
        mc_samples: cfg.mc_samples(),
        bins: cfg.eval.bins,
        seed: cfg.seed,
        cross_view: cfg.eval.cross_view.then(|| cfg.policy.clone()),
    }
}

pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model<f64>,
    records: &[PatientRecord],
    level: f64,
    variant: Variant,
) -> Result<MetricsReport, InferenceError> {
    evaluate(model, records, &eval_options(cfg, level, variant), &cfg.hash())
}

/// A pretrained and fine-tuned model.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub pretrain: PretrainOutcome<f64>,
    pub finetune: FinetuneOutcome<f64>,
}

impl TrainedRun {
    pub fn model(&self) -> &Model<f64> {
        &self.finetune.model
    }
}

/// Pretrains, then fine-tunes the best pretraining checkpoint in the
/// configured mode.
pub fn train(cfg: &RunConfig, data: &Data) -> Result<TrainedRun, TrainError> {
    let pre = pretrain(cfg, data)?;
    let ft = finetune(cfg, pre.best.clone(), data, cfg.finetune.mode)?;
    Ok(TrainedRun {
        pretrain: pre,
        finetune: ft,
    })
}

/// Component removed by an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// `λ_cons = 0`.
    Consistency,
    /// Point-estimate encoder instead of a distribution.
    Distribution,
    /// `λ_nce = 0`.
    Contrastive,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consistency" => Ok(Self::Consistency),
            "distribution" => Ok(Self::Distribution),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Consistency => "consistency",
            Self::Distribution => "distribution",
            Self::Contrastive => "contrastive",
        }
    }

    /// The configuration with this component removed; seeds are unchanged.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            Self::Consistency => out.weights.lambda_cons = 0.0,
            Self::Distribution => out.weights.deterministic = true,
            Self::Contrastive => out.weights.lambda_nce = 0.0,
        }
        out
    }

    /// Evaluation variant matching the trained model.
    pub fn variant(self) -> Variant {
        match self {
            Self::Distribution => Variant::Deterministic,
            _ => Variant::Distributional,
        }
    }
}

/// The variant a configuration is meant to be evaluated with.
pub fn native_variant(cfg: &RunConfig) -> Variant {
    if cfg.weights.deterministic {
        Variant::Deterministic
    } else {
        Variant::Distributional
    }
}
