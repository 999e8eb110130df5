//! Run configuration: one JSON document describing data, model, objective,
//! view policy, optimizer, fine-tuning, evaluation and seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::canonical_hash;
use crate::model::{ModelConfig, TaskKind};
use crate::objectives::LossWeights;
use crate::synthdata::{GeneratorSpec, TaskSpec};
use crate::trainer::{FinetuneMode, OptimConfig};
use crate::viewgen::ViewPolicy;

/// Where records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generator(GeneratorSpec),
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Generator(GeneratorSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Fraction of the labeled training records used (a fixed prefix).
    pub label_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::HeadOnly,
            label_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte Carlo samples; falls back to `weights.mc_samples`.
    pub mc_samples: Option<usize>,
    pub bins: usize,
    pub mask_levels: Vec<f64>,
    /// Compute cross-view SKL and MMD (needs paired views per record).
    pub cross_view: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: None,
            bins: crate::metrics::DEFAULT_BINS,
            mask_levels: vec![0.0, 0.25, 0.5, 0.75],
            cross_view: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub splits: SplitConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub policy: ViewPolicy,
    pub optim: OptimConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON of the whole configuration.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn mc_samples(&self) -> usize {
        self.eval.mc_samples.unwrap_or(self.weights.mc_samples)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.weights.validate().map_err(|e| e.to_string())?;
        self.policy.validate().map_err(|e| e.to_string())?;
        self.optim.validate()?;
        let s = &self.splits;
        let fractions_ok = (0.0..1.0).contains(&s.val_fraction)
            && (0.0..1.0).contains(&s.test_fraction)
            && s.val_fraction + s.test_fraction < 1.0;
        if !fractions_ok {
            return Err("split fractions must be in [0, 1) and sum below 1".into());
        }
        let lf = self.finetune.label_fraction;
        if !(lf > 0.0 && lf <= 1.0) {
            return Err("finetune.label_fraction must lie in (0, 1]".into());
        }
        if self.eval.bins == 0 || self.eval.mc_samples == Some(0) {
            return Err("eval.bins and eval.mc_samples must be positive".into());
        }
        if self
            .eval
            .mask_levels
            .iter()
            .any(|l| !(0.0..1.0).contains(l))
        {
            return Err("mask levels must lie in [0, 1)".into());
        }
        if let DataSource::Generator(spec) = &self.data {
            spec.validate().map_err(|e| e.to_string())?;
            if spec.modality_dims != self.model.modality_dims {
                return Err(format!(
                    "data.modality_dims {:?} differ from model.modality_dims {:?}",
                    spec.modality_dims, self.model.modality_dims
                ));
            }
            let task_ok = matches!(
                (&spec.task, &self.model.task),
                (TaskSpec::Binary { .. }, TaskKind::Classification { classes: 2 })
                    | (TaskSpec::Regression { .. }, TaskKind::Regression)
            );
            if !task_ok {
                return Err("model.task does not match the generator task".into());
            }
        }
        Ok(())
    }
}
