//! Linear-Gaussian synthetic records with an exact Bayesian posterior.
//!
//! Each record draws `z ~ N(0, I_d)` and observes every modality as
//! `x_m = W_m z + ε_m` with `ε_m ~ N(0, σ_m² I)`. Because the model is
//! conjugate, the posterior under any modality subset is available in closed
//! form and serves as ground truth for the learned encoder.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::PatientRecord;
use crate::gaussian::{GaussianError, GaussianPosterior};
use crate::metrics::{self, MetricError, MetricsReport, ReportMeta};
use crate::rng;
use crate::viewgen::{mask_for_record, sweep_masks, ViewError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("record {0} does not match the generator dimensions")]
    RecordShape(String),
    #[error("posterior precision is not positive definite (internal error)")]
    Cholesky,
    #[error("modality {0} has a non-diagonal Gram matrix; its likelihood is not a diagonal expert")]
    NotDiagonal(usize),
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// How the observation matrices are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum WeightStructure {
    /// `W_m = diag · [I; I; …] + noise · N(0, 1)`: every row reads mainly one
    /// latent coordinate, cycling through them.
    DiagonalDominant { diag: f64, noise: f64 },
    /// Row `i` reads only coordinate `i mod d`, with weight `U(min, max)`, so
    /// every Gram matrix `W_mᵀ W_m` is diagonal.
    Diagonal { min: f64, max: f64 },
}

/// Map from latent state to label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TaskSpec {
    /// `y ~ Bernoulli(σ(w·z + b))` with `‖w‖ = weight_norm` and `b` chosen so
    /// that the marginal positive rate equals `positive_rate`.
    Binary { weight_norm: f64, positive_rate: f64 },
    /// `y = v·z + noise_std · ε` with `‖v‖ = weight_norm`.
    Regression { weight_norm: f64, noise_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub modality_dims: Vec<usize>,
    /// Observation noise σ per modality.
    pub noise_std: Vec<f64>,
    pub records: usize,
    pub seed: u64,
    pub weights: WeightStructure,
    pub task: TaskSpec,
    /// Probability that a modality is absent from a record (at least one is
    /// always kept).
    pub p_missing: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            modality_dims: vec![16, 16, 16],
            noise_std: vec![0.5; 3],
            records: 5000,
            seed: 0,
            weights: WeightStructure::DiagonalDominant {
                diag: 0.8,
                noise: 0.2,
            },
            task: TaskSpec::Binary {
                weight_norm: 3.0,
                positive_rate: 0.3,
            },
            p_missing: 0.0,
        }
    }
}

impl GeneratorSpec {
    pub fn modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return bad("need at least one modality, each with positive dim");
        }
        if self.noise_std.len() != self.modality_dims.len() {
            return bad("noise_std needs one entry per modality");
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("noise_std must be positive");
        }
        if !(0.0..1.0).contains(&self.p_missing) {
            return bad("p_missing must lie in [0, 1)");
        }
        match self.weights {
            WeightStructure::DiagonalDominant { diag, noise } => {
                if !diag.is_finite() || !(noise.is_finite() && noise >= 0.0) {
                    return bad("diagonal-dominant weights need finite diag and noise >= 0");
                }
            }
            WeightStructure::Diagonal { min, max } => {
                if !(min.is_finite() && max.is_finite() && min <= max) {
                    return bad("diagonal weights need min <= max");
                }
            }
        }
        match self.task {
            TaskSpec::Binary {
                weight_norm,
                positive_rate,
            } => {
                if !(weight_norm.is_finite() && weight_norm >= 0.0) {
                    return bad("weight_norm must be non-negative");
                }
                if !(positive_rate > 0.0 && positive_rate < 1.0) {
                    return bad("positive_rate must lie in (0, 1)");
                }
            }
            TaskSpec::Regression {
                weight_norm,
                noise_std,
            } => {
                if !(weight_norm.is_finite() && weight_norm >= 0.0) {
                    return bad("weight_norm must be non-negative");
                }
                if !(noise_std.is_finite() && noise_std >= 0.0) {
                    return bad("regression noise_std must be non-negative");
                }
            }
        }
        Ok(())
    }
}

/// Full-covariance Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl ExactPosterior {
    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }

    /// Mean and the diagonal of the covariance.
    pub fn diagonalized(&self) -> Result<GaussianPosterior<f64>, GaussianError> {
        GaussianPosterior::new(
            self.mean.iter().copied().collect(),
            self.covariance.diagonal().iter().map(|v| v.ln()).collect(),
        )
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `E[σ(s·t + b)]` for `t ~ N(0, 1)` by trapezoidal quadrature on [-10, 10].
fn expected_logistic(scale: f64, b: f64) -> f64 {
    const STEPS: usize = 4000;
    let h = 20.0 / STEPS as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for i in 0..=STEPS {
        let t = -10.0 + i as f64 * h;
        let w = if i == 0 || i == STEPS { 0.5 } else { 1.0 };
        total += w * logistic(scale * t + b) * (-0.5 * t * t).exp() / norm;
    }
    total * h
}

/// Intercept giving marginal positive rate `rate` when `w·z ~ N(0, scale²)`.
fn intercept_for_rate(scale: f64, rate: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_logistic(scale, mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A generator with its observation matrices and task map frozen.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    /// `W_m`, `p_m × d`.
    pub weights: Vec<DMatrix<f64>>,
    /// Task direction (`w` or `v`).
    pub task_weights: DVector<f64>,
    pub intercept: f64,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let d = spec.latent_dim;
        let mut r = rng::stream(spec.seed, "synth.weights");
        let weights = spec
            .modality_dims
            .iter()
            .map(|&p| match spec.weights {
                WeightStructure::DiagonalDominant { diag, noise } => DMatrix::from_fn(p, d, |i, j| {
                    let base = if i % d == j { diag } else { 0.0 };
                    let n: f64 = r.sample(StandardNormal);
                    base + noise * n
                }),
                WeightStructure::Diagonal { min, max } => {
                    let dist = Uniform::new_inclusive(min, max);
                    DMatrix::from_fn(p, d, |i, j| if i % d == j { dist.sample(&mut r) } else { 0.0 })
                }
            })
            .collect();
        let raw = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let (norm, intercept) = match spec.task {
            TaskSpec::Binary {
                weight_norm,
                positive_rate,
            } => (weight_norm, intercept_for_rate(weight_norm, positive_rate)),
            TaskSpec::Regression { weight_norm, .. } => (weight_norm, 0.0),
        };
        let task_weights = if raw.norm() > 0.0 {
            raw.normalize() * norm
        } else {
            raw
        };
        Ok(Self {
            spec: spec.clone(),
            weights,
            task_weights,
            intercept,
        })
    }

    /// Generator with explicitly supplied matrices and task map.
    pub fn from_parts(
        spec: &GeneratorSpec,
        weights: Vec<DMatrix<f64>>,
        task_weights: DVector<f64>,
        intercept: f64,
    ) -> Result<Self, SynthError> {
        spec.validate()?;
        let d = spec.latent_dim;
        let shapes_ok = weights.len() == spec.modalities()
            && weights
                .iter()
                .zip(&spec.modality_dims)
                .all(|(w, &p)| w.nrows() == p && w.ncols() == d)
            && task_weights.len() == d;
        if !shapes_ok {
            return Err(SynthError::Spec("matrix shapes do not match the generator spec".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            task_weights,
            intercept,
        })
    }

    pub fn record_id(index: usize) -> String {
        format!("r{index:06}")
    }

    /// One record; a pure function of the generator seed and the index.
    pub fn record(&self, index: usize) -> PatientRecord {
        let spec = &self.spec;
        let id = Self::record_id(index);
        let mut r = rng::item_stream(spec.seed, "synth.record", &id, 0);
        let d = spec.latent_dim;
        let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let mut modalities: Vec<Vec<f64>> = self
            .weights
            .iter()
            .zip(&spec.noise_std)
            .map(|(w, &s)| {
                let clean = w * &z;
                clean
                    .iter()
                    .map(|&c| c + s * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let m = spec.modalities();
        let mut mask: Vec<bool> = (0..m).map(|_| r.gen::<f64>() >= spec.p_missing).collect();
        if !mask.iter().any(|&b| b) {
            mask[r.gen_range(0..m)] = true;
        }
        for (values, &obs) in modalities.iter_mut().zip(&mask) {
            if !obs {
                values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let signal = self.task_weights.dot(&z);
        let label = match spec.task {
            TaskSpec::Binary { .. } => {
                let p = logistic(signal + self.intercept);
                if r.gen::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
            TaskSpec::Regression { noise_std, .. } => {
                signal + noise_std * r.sample::<f64, _>(StandardNormal)
            }
        };
        PatientRecord {
            id,
            modalities,
            mask,
            label: Some(label),
            z_true: Some(z.iter().copied().collect()),
        }
    }

    pub fn generate(&self) -> Vec<PatientRecord> {
        (0..self.spec.records).map(|i| self.record(i)).collect()
    }

    fn check_record(&self, record: &PatientRecord) -> Result<(), SynthError> {
        let ok = record.modalities.len() == self.spec.modalities()
            && record.mask.len() == self.spec.modalities()
            && record
                .modalities
                .iter()
                .zip(&self.spec.modality_dims)
                .all(|(v, &p)| v.len() == p);
        if ok {
            Ok(())
        } else {
            Err(SynthError::RecordShape(record.id.clone()))
        }
    }

    /// Posterior over `z` given the modalities observed under
    /// `record.mask ∧ mask`. No observed modality gives the prior.
    pub fn exact_posterior(
        &self,
        record: &PatientRecord,
        mask: Option<&[bool]>,
    ) -> Result<ExactPosterior, SynthError> {
        self.check_record(record)?;
        let d = self.spec.latent_dim;
        let mut precision = DMatrix::<f64>::identity(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for (m, w) in self.weights.iter().enumerate() {
            let observed = record.mask[m] && mask.map_or(true, |mk| mk.get(m).copied().unwrap_or(false));
            if !observed {
                continue;
            }
            let inv_var = 1.0 / (self.spec.noise_std[m] * self.spec.noise_std[m]);
            precision += w.transpose() * w * inv_var;
            let x = DVector::from_column_slice(&record.modalities[m]);
            rhs += w.transpose() * x * inv_var;
        }
        let chol = precision.cholesky().ok_or(SynthError::Cholesky)?;
        let mean = chol.solve(&rhs);
        let covariance = chol.inverse();
        Ok(ExactPosterior { mean, covariance })
    }

    /// The likelihood of modality `m` as a diagonal Gaussian over `z` (prior
    /// excluded). Requires `W_mᵀ W_m` to be diagonal with a positive diagonal.
    pub fn likelihood_expert(
        &self,
        record: &PatientRecord,
        m: usize,
    ) -> Result<GaussianPosterior<f64>, SynthError> {
        self.check_record(record)?;
        let w = self
            .weights
            .get(m)
            .ok_or_else(|| SynthError::Spec(format!("no modality {m}")))?;
        let gram = w.transpose() * w;
        let d = self.spec.latent_dim;
        for i in 0..d {
            for j in 0..d {
                if i != j && gram[(i, j)] != 0.0 {
                    return Err(SynthError::NotDiagonal(m));
                }
            }
            if gram[(i, i)] <= 0.0 {
                return Err(SynthError::NotDiagonal(m));
            }
        }
        let inv_var = 1.0 / (self.spec.noise_std[m] * self.spec.noise_std[m]);
        let proj = w.transpose() * DVector::from_column_slice(&record.modalities[m]);
        let mut mean = Vec::with_capacity(d);
        let mut log_var = Vec::with_capacity(d);
        for i in 0..d {
            let prec = gram[(i, i)] * inv_var;
            mean.push(proj[i] * inv_var / prec);
            log_var.push(-prec.ln());
        }
        Ok(GaussianPosterior::new(mean, log_var)?)
    }

    /// Probability of the positive class given `z` (binary task only).
    pub fn positive_probability(&self, z: &DVector<f64>) -> f64 {
        logistic(self.task_weights.dot(z) + self.intercept)
    }

    /// Metrics of the exact-posterior predictor at a sweep mask level.
    ///
    /// The predictive is the posterior expectation of the true task map,
    /// estimated with `samples` antithetic draws per record.
    pub fn bayes_optimal_metrics(
        &self,
        records: &[PatientRecord],
        level: f64,
        samples: usize,
        seed: u64,
    ) -> Result<MetricsReport, SynthError> {
        let masks = sweep_masks(self.spec.modalities(), level)?;
        let mut report = MetricsReport::new(ReportMeta {
            seed,
            mask_level: level,
            mc_samples: samples,
            variant: "bayes_optimal".into(),
            ..ReportMeta::default()
        });
        let pairs = samples.div_ceil(2).max(1);
        let d = self.spec.latent_dim;
        let mut probs = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        let mut means = Vec::with_capacity(records.len());
        let mut trace = 0.0;
        for (i, record) in records.iter().enumerate() {
            let y = record
                .label
                .ok_or_else(|| SynthError::MissingLabel(record.id.clone()))?;
            let post = self.exact_posterior(record, Some(mask_for_record(&masks, i)))?;
            trace += post.trace();
            match self.spec.task {
                TaskSpec::Binary { .. } => {
                    let l = post
                        .covariance
                        .clone()
                        .cholesky()
                        .ok_or(SynthError::Cholesky)?
                        .l();
                    let mut r = rng::item_stream(seed, "bayes.mc", &record.id, 0);
                    let mut p = 0.0;
                    for _ in 0..pairs {
                        let eps = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
                        let delta = &l * eps;
                        p += self.positive_probability(&(&post.mean + &delta));
                        p += self.positive_probability(&(&post.mean - &delta));
                    }
                    p /= (2 * pairs) as f64;
                    probs.push(vec![1.0 - p, p]);
                    labels.push(y);
                }
                TaskSpec::Regression { .. } => {
                    means.push(self.task_weights.dot(&post.mean));
                    labels.push(y);
                }
            }
        }
        report.set("mean_posterior_trace", trace / records.len().max(1) as f64);
        if records.is_empty() {
            return Ok(report);
        }
        match self.spec.task {
            TaskSpec::Binary { .. } => {
                let classes: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
                let flags: Vec<bool> = labels.iter().map(|&y| y > 0.5).collect();
                let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
                report.set_opt("auroc", metrics::auroc(&flags, &scores).ok());
                report.set_opt("auprc", metrics::auprc(&flags, &scores).ok());
                report.set("ece", metrics::ece(&classes, &probs, metrics::DEFAULT_BINS)?);
                report.set("nll", metrics::nll(&classes, &probs)?);
                report.set("accuracy", metrics::accuracy(&classes, &probs)?);
            }
            TaskSpec::Regression { .. } => {
                report.set("mse", metrics::mse(&labels, &means)?);
            }
        }
        Ok(report)
    }
}
