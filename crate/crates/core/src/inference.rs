//! Predictive inference with uncertainty propagation and model evaluation.
//!
//! Predictions average the task head over reparameterized posterior samples
//! drawn in antithetic (±ε) pairs. The deterministic variant evaluates the
//! head once at the posterior mean and never reads the log-variance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Tensor};
use crate::encoder::{encode_views, EncodeError, PatientRecord};
use crate::gaussian::{self, GaussianError, GaussianPosterior, StandardPrior, LOGVAR_MAX};
use crate::metrics::{self, MetricError, MetricsReport, ReportMeta, PROB_CLIP};
use crate::model::{Model, TaskKind};
use crate::objectives::head_forward;
use crate::rng;
use crate::scalar::Scalar;
use crate::viewgen::{self, mask_for_record, sweep_masks, View, ViewError, ViewPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("need at least one Monte Carlo sample")]
    NoSamples,
    #[error("entropy is defined for classification outputs only")]
    NotClassification,
    #[error("threshold must be non-negative, got {0}")]
    Threshold(f64),
    #[error("no snapshots to fuse")]
    NoSnapshots,
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Tape(#[from] DiffError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictiveDistribution {
    Classification {
        probs: Vec<f64>,
    },
    Regression {
        mean: f64,
        /// Mean of the per-sample head variances.
        aleatoric: f64,
        /// Variance of the per-sample head means.
        epistemic: f64,
    },
}

impl PredictiveDistribution {
    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Self::Classification { probs } => Some(probs),
            Self::Regression { .. } => None,
        }
    }
}

/// How predictions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Average over `K` posterior samples.
    Distributional,
    /// One head evaluation at the posterior mean.
    Deterministic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Distributional => "distributional",
            Self::Deterministic => "deterministic",
        }
    }
}

/// `k` noise vectors in `±ε` pairs; an odd `k` ends with one unpaired draw.
pub fn antithetic_noise(rng: &mut impl Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() + 1 < k {
            let neg = eps.iter().map(|e| -e).collect();
            out.push(eps);
            out.push(neg);
        } else {
            out.push(eps);
        }
    }
    out
}

/// Task head at each row of `zs`.
pub fn head_at<S: Scalar>(model: &Model<S>, zs: &[Vec<S>]) -> Result<Vec<Vec<f64>>, InferenceError> {
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    let d = model.config.latent_dim;
    let mut tape = Tape::new();
    let dec = model.bind_decoder(&mut tape);
    let flat: Vec<S> = zs.iter().flatten().copied().collect();
    let z = tape.leaf(Tensor::matrix(zs.len(), d, flat)?);
    let out = head_forward(&mut tape, &dec, z)?;
    let value = tape.value(out);
    Ok((0..zs.len())
        .map(|r| value.row(r).iter().map(|v| v.to_f64_lossy()).collect())
        .collect())
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn smooth_log_var(raw: f64) -> f64 {
    LOGVAR_MAX * (raw / LOGVAR_MAX).tanh()
}

/// Combines per-sample head outputs into a predictive distribution.
pub fn combine_outputs(task: &TaskKind, outputs: &[Vec<f64>], temperature: f64) -> PredictiveDistribution {
    let k = outputs.len() as f64;
    match task {
        TaskKind::Classification { classes } => {
            let mut probs = vec![0.0; *classes];
            for o in outputs {
                for (acc, p) in probs.iter_mut().zip(softmax(o, temperature)) {
                    *acc += p;
                }
            }
            probs.iter_mut().for_each(|p| *p /= k);
            // renormalize so rounding never leaves the simplex
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            PredictiveDistribution::Classification { probs }
        }
        TaskKind::Regression => {
            let means: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            let mean = means.iter().sum::<f64>() / k;
            let aleatoric = outputs.iter().map(|o| smooth_log_var(o[1]).exp()).sum::<f64>() / k;
            let epistemic = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / k;
            PredictiveDistribution::Regression {
                mean,
                aleatoric,
                epistemic,
            }
        }
    }
}

/// Reparameterized samples `μ + σ ⊙ ε` for each noise vector.
pub fn posterior_samples<S: Scalar>(
    q: &GaussianPosterior<S>,
    noise: &[Vec<f64>],
) -> Result<Vec<Vec<S>>, InferenceError> {
    noise
        .iter()
        .map(|eps| {
            let eps: Vec<S> = eps.iter().map(|&e| S::lit(e)).collect();
            Ok(gaussian::sample(q, &eps)?)
        })
        .collect()
}

/// Monte Carlo predictive distribution under posterior `q`.
pub fn predict_from_posterior<S: Scalar>(
    model: &Model<S>,
    q: &GaussianPosterior<S>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<PredictiveDistribution, InferenceError> {
    if k == 0 {
        return Err(InferenceError::NoSamples);
    }
    let noise = antithetic_noise(rng, k, q.dim());
    let zs = posterior_samples(q, &noise)?;
    let outputs = head_at(model, &zs)?;
    Ok(combine_outputs(
        &model.config.task,
        &outputs,
        model.temperature.to_f64_lossy(),
    ))
}

/// Head evaluated once at the posterior mean.
pub fn predict_at_mean<S: Scalar>(
    model: &Model<S>,
    q: &GaussianPosterior<S>,
) -> Result<PredictiveDistribution, InferenceError> {
    let outputs = head_at(model, &[q.mean().to_vec()])?;
    Ok(combine_outputs(
        &model.config.task,
        &outputs,
        model.temperature.to_f64_lossy(),
    ))
}

/// Encodes `record` under `mask` and predicts with `k` samples.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    record: &PatientRecord,
    mask: Option<&[bool]>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<PredictiveDistribution, InferenceError> {
    let q = crate::encoder::encode(model, record, mask)?;
    predict_from_posterior(model, &q, k, rng)
}

/// `−Σ p log p` with `0 · log 0 = 0`.
pub fn predictive_entropy(p: &PredictiveDistribution) -> Result<f64, InferenceError> {
    let probs = p.probs().ok_or(InferenceError::NotClassification)?;
    Ok(probs
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Predict(usize),
    Abstain,
}

/// Abstains iff the predictive entropy exceeds `threshold`.
pub fn selective_predict(
    p: &PredictiveDistribution,
    threshold: f64,
) -> Result<Selection, InferenceError> {
    if !(threshold >= 0.0) {
        return Err(InferenceError::Threshold(threshold));
    }
    let h = predictive_entropy(p)?;
    if h > threshold {
        return Ok(Selection::Abstain);
    }
    let probs = p.probs().expect("entropy checked the kind");
    let mut best = 0;
    for (i, &q) in probs.iter().enumerate() {
        if q > probs[best] {
            best = i;
        }
    }
    Ok(Selection::Predict(best))
}

/// Fuses the encoded posteriors of several snapshots of one patient by
/// product of experts with the prior counted once. The result does not
/// depend on snapshot order.
pub fn update_sequential<S: Scalar>(
    model: &Model<S>,
    snapshots: &[View],
) -> Result<GaussianPosterior<S>, InferenceError> {
    if snapshots.is_empty() {
        return Err(InferenceError::NoSnapshots);
    }
    for v in snapshots {
        if v.observed_count() == 0 {
            return Err(EncodeError::NoEvidence(v.record_id.clone()).into());
        }
    }
    let refs: Vec<&View> = snapshots.iter().collect();
    let experts = encode_views(model, &refs)?;
    let keyed: Vec<(Vec<u64>, GaussianPosterior<S>)> = experts
        .into_iter()
        .map(|q| {
            let key = q
                .mean()
                .iter()
                .chain(q.log_var())
                .map(|v| v.to_f64_lossy().to_bits())
                .collect();
            (key, q)
        })
        .collect();
    Ok(gaussian::poe_fuse_by_key(
        &keyed,
        StandardPrior::new(model.config.latent_dim),
    )?)
}

/// Spearman correlation between posterior log-volumes and per-record NLL;
/// `None` when either is constant.
pub fn posterior_volume_correlation(
    log_dets: &[f64],
    nlls: &[f64],
) -> Result<Option<f64>, InferenceError> {
    Ok(metrics::spearman(log_dets, nlls)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub level: f64,
    pub variant: Variant,
    pub mc_samples: usize,
    pub bins: usize,
    pub seed: u64,
    /// Policy for the paired views of the cross-view analysis; `None` skips it.
    pub cross_view: Option<ViewPolicy>,
}

/// Per-record outputs of an evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalOutputs<S> {
    pub posteriors: Vec<GaussianPosterior<S>>,
    pub predictions: Vec<PredictiveDistribution>,
    /// Records that had no observed modality under the sweep mask and were
    /// scored from the prior.
    pub no_evidence: usize,
}

/// Posteriors (prior for records without evidence) and predictions for
/// `records` under the sweep masks of `opts.level`.
pub fn predict_records<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    opts: &EvalOptions,
) -> Result<EvalOutputs<S>, InferenceError> {
    let masks = sweep_masks(model.config.modalities(), opts.level)?;
    let views: Vec<View> = records
        .iter()
        .enumerate()
        .map(|(i, r)| View::from_record(r, Some(mask_for_record(&masks, i))))
        .collect::<Result<_, _>>()?;
    let with_evidence: Vec<&View> = views.iter().filter(|v| v.observed_count() > 0).collect();
    let mut encoded = encode_views(model, &with_evidence)?.into_iter();
    let d = model.config.latent_dim;
    let mut posteriors = Vec::with_capacity(records.len());
    let mut no_evidence = 0;
    for v in &views {
        if v.observed_count() > 0 {
            posteriors.push(encoded.next().expect("one posterior per view"));
        } else {
            no_evidence += 1;
            posteriors.push(GaussianPosterior::standard(d));
        }
    }
    let predictions = match opts.variant {
        Variant::Deterministic => {
            let means: Vec<Vec<S>> = posteriors.iter().map(|q| q.mean().to_vec()).collect();
            let temp = model.temperature.to_f64_lossy();
            head_at(model, &means)?
                .iter()
                .map(|o| combine_outputs(&model.config.task, std::slice::from_ref(o), temp))
                .collect()
        }
        Variant::Distributional => {
            if opts.mc_samples == 0 {
                return Err(InferenceError::NoSamples);
            }
            let k = opts.mc_samples;
            let mut zs = Vec::with_capacity(records.len() * k);
            for (r, q) in records.iter().zip(&posteriors) {
                let mut stream = rng::item_stream(opts.seed, "predict", &r.id, 0);
                zs.extend(posterior_samples(q, &antithetic_noise(&mut stream, k, d))?);
            }
            let outputs = head_at(model, &zs)?;
            let temp = model.temperature.to_f64_lossy();
            outputs
                .chunks(k)
                .map(|chunk| combine_outputs(&model.config.task, chunk, temp))
                .collect()
        }
    };
    Ok(EvalOutputs {
        posteriors,
        predictions,
        no_evidence,
    })
}

/// Keeps only the `k`-th observed modality of `record` (cyclically).
fn single_modality_mask(record: &PatientRecord, k: usize) -> Vec<bool> {
    let observed: Vec<usize> = (0..record.mask.len()).filter(|&m| record.mask[m]).collect();
    let mut mask = vec![false; record.mask.len()];
    if !observed.is_empty() {
        mask[observed[k % observed.len()]] = true;
    }
    mask
}

/// Cross-view agreement of a model's representations.
///
/// * Symmetric KL between the posteriors of two policy-sampled views of
///   each record, averaged over records.
/// * Squared MMD between posterior means derived from different modality
///   subsets: all observed modalities for even-indexed records against a
///   single observed modality (cycling through them) for odd-indexed
///   records. Disjoint records keep the two samples independent, as the
///   unbiased estimator assumes.
pub fn cross_view_analysis<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    policy: &ViewPolicy,
    seed: u64,
    deterministic: bool,
) -> Result<(f64, metrics::MmdEstimate), InferenceError> {
    let mut va = Vec::with_capacity(records.len());
    let mut vb = Vec::with_capacity(records.len());
    for r in records {
        let (a, b) = viewgen::paired_views(r, policy, &mut policy.rng_for(seed, &r.id, 0))?;
        va.push(a);
        vb.push(b);
    }
    let qa = encode_views(model, &va.iter().collect::<Vec<_>>())?;
    let qb = encode_views(model, &vb.iter().collect::<Vec<_>>())?;
    let strip = |q: &GaussianPosterior<S>| {
        if deterministic {
            GaussianPosterior::new(q.mean().to_vec(), vec![S::zero(); q.dim()])
        } else {
            Ok(q.clone())
        }
    };
    let mut skl = 0.0;
    for (a, b) in qa.iter().zip(&qb) {
        skl += gaussian::skl(&strip(a)?, &strip(b)?)?.to_f64_lossy();
    }
    skl /= records.len().max(1) as f64;

    let mut full = Vec::new();
    let mut single = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if i % 2 == 0 {
            full.push(View::from_record(r, None)?);
        } else {
            single.push(View::from_record(r, Some(&single_modality_mask(r, i / 2)))?);
        }
    }
    let means = |views: &[View]| -> Result<Vec<Vec<f64>>, InferenceError> {
        let refs: Vec<&View> = views.iter().filter(|v| v.observed_count() > 0).collect();
        Ok(encode_views(model, &refs)?
            .iter()
            .map(|q| q.mean().iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    };
    let mmd = metrics::mmd(&means(&full)?, &means(&single)?)?;
    Ok((skl, mmd))
}

/// Per-record negative log-likelihood of `predictions`.
pub fn per_record_nll(predictions: &[PredictiveDistribution], labels: &[f64]) -> Vec<f64> {
    predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| match p {
            PredictiveDistribution::Classification { probs } => {
                -probs[y as usize].clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln()
            }
            PredictiveDistribution::Regression {
                mean,
                aleatoric,
                epistemic,
            } => metrics::gaussian_nll(&[y], &[*mean], &[aleatoric + epistemic])
                .expect("single element"),
        })
        .collect()
}

/// Spearman correlation between posterior log-volume and per-record NLL,
/// pooled over the records evaluated at every level in `levels`. Pooling
/// across missingness levels makes evidence, and hence difficulty, vary
/// between the pooled cases. Records without evidence at a level are left
/// out, since their volume is the prior's by construction.
pub fn pooled_volume_correlation<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    levels: &[f64],
    opts: &EvalOptions,
) -> Result<Option<f64>, InferenceError> {
    let labels: Vec<f64> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| InferenceError::MissingLabel(r.id.clone())))
        .collect::<Result<_, _>>()?;
    let mut log_dets = Vec::new();
    let mut nlls = Vec::new();
    for &level in levels {
        let level_opts = EvalOptions {
            level,
            variant: Variant::Distributional,
            cross_view: None,
            ..opts.clone()
        };
        let out = predict_records(model, records, &level_opts)?;
        let masks = sweep_masks(model.config.modalities(), level)?;
        let nll = per_record_nll(&out.predictions, &labels);
        for (i, (q, l)) in out.posteriors.iter().zip(nll).enumerate() {
            let evidence = records[i]
                .mask
                .iter()
                .zip(mask_for_record(&masks, i))
                .any(|(&a, &b)| a && b);
            if evidence {
                log_dets.push(gaussian::log_det_cov(q).to_f64_lossy());
                nlls.push(l);
            }
        }
    }
    posterior_volume_correlation(&log_dets, &nlls)
}

/// Full metric report for `records` at one mask level and variant.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    opts: &EvalOptions,
    config_hash: &str,
) -> Result<MetricsReport, InferenceError> {
    let out = predict_records(model, records, opts)?;
    let mut report = MetricsReport::new(ReportMeta {
        config_hash: config_hash.to_string(),
        seed: opts.seed,
        mask_level: opts.level,
        mc_samples: match opts.variant {
            Variant::Distributional => opts.mc_samples,
            Variant::Deterministic => 1,
        },
        variant: opts.variant.name().to_string(),
        flags: Vec::new(),
    });
    report.set("records", records.len() as f64);
    report.set("no_evidence_records", out.no_evidence as f64);
    if records.is_empty() {
        return Ok(report);
    }
    let labels: Vec<f64> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| InferenceError::MissingLabel(r.id.clone())))
        .collect::<Result<_, _>>()?;

    let per_record_nll: Vec<f64> = match &model.config.task {
        TaskKind::Classification { classes } => {
            let classes = *classes;
            let ys: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            let probs: Vec<Vec<f64>> = out
                .predictions
                .iter()
                .map(|p| p.probs().expect("classification").to_vec())
                .collect();
            if classes == 2 {
                let flags: Vec<bool> = ys.iter().map(|&y| y == 1).collect();
                let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
                report.set_opt("auroc", metrics::auroc(&flags, &scores).ok());
                report.set_opt("auprc", metrics::auprc(&flags, &scores).ok());
            }
            report.set("ece", metrics::ece(&ys, &probs, opts.bins)?);
            report.set("nll", metrics::nll(&ys, &probs)?);
            report.set("accuracy", metrics::accuracy(&ys, &probs)?);
            let mut h = 0.0;
            for p in &out.predictions {
                h += predictive_entropy(p)?;
            }
            report.set("mean_predictive_entropy", h / records.len() as f64);
            per_record_nll(&out.predictions, &labels)
        }
        TaskKind::Regression => {
            let mut means = Vec::new();
            let mut vars = Vec::new();
            for p in &out.predictions {
                if let PredictiveDistribution::Regression {
                    mean,
                    aleatoric,
                    epistemic,
                } = p
                {
                    means.push(*mean);
                    vars.push(aleatoric + epistemic);
                }
            }
            report.set("mse", metrics::mse(&labels, &means)?);
            report.set("gaussian_nll", metrics::gaussian_nll(&labels, &means, &vars)?);
            per_record_nll(&out.predictions, &labels)
        }
    };

    if opts.variant == Variant::Distributional {
        let entropies: Vec<f64> = out
            .posteriors
            .iter()
            .map(|q| gaussian::entropy(q).to_f64_lossy())
            .collect();
        let log_dets: Vec<f64> = out
            .posteriors
            .iter()
            .map(|q| gaussian::log_det_cov(q).to_f64_lossy())
            .collect();
        let n = records.len() as f64;
        report.set("mean_posterior_entropy", entropies.iter().sum::<f64>() / n);
        report.set("mean_log_det", log_dets.iter().sum::<f64>() / n);
        report.set_opt(
            "volume_corr",
            posterior_volume_correlation(&log_dets, &per_record_nll)?,
        );
    }

    if let Some(policy) = &opts.cross_view {
        let (skl, mmd) = cross_view_analysis(
            model,
            records,
            policy,
            opts.seed,
            opts.variant == Variant::Deterministic,
        )?;
        report.set("cross_view_skl", skl);
        report.set("cross_view_mmd2", mmd.value);
        if mmd.biased {
            report.meta.flags.push("mmd_biased_estimator".into());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(task: TaskKind, head_hidden: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: 3,
            embed_dim: 4,
            hidden_dim: 5,
            modality_dims: vec![2, 3],
            head_hidden,
            task,
            ..ModelConfig::default()
        }
    }

    fn record() -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            modalities: vec![vec![0.3, -1.0], vec![0.5, 1.5, -0.2]],
            mask: vec![true, true],
            label: Some(1.0),
            z_true: None,
        }
    }

    #[test]
    fn antithetic_pairs() {
        let noise = antithetic_noise(&mut rng::stream(1, "t"), 5, 3);
        assert_eq!(noise.len(), 5);
        for k in [0, 2] {
            for i in 0..3 {
                assert_eq!(noise[k][i], -noise[k + 1][i]);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Model::<f64>::init(&cfg(TaskKind::Classification { classes: 3 }, 4), 1);
        for k in [1, 2, 7, 8] {
            let p = predict(&model, &record(), None, k, &mut rng::stream(2, "p")).unwrap();
            let probs = p.probs().unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(probs.iter().all(|&q| q >= 0.0));
        }
        assert_eq!(
            predict(&model, &record(), None, 0, &mut rng::stream(2, "p")),
            Err(InferenceError::NoSamples)
        );
    }

    #[test]
    fn affine_regression_head_mean_is_exact_under_antithetic_noise() {
        let model = Model::<f64>::init(&cfg(TaskKind::Regression, 0), 3);
        let q = crate::encoder::encode(&model, &record(), None).unwrap();
        let at_mean = head_at(&model, &[q.mean().to_vec()]).unwrap()[0][0];
        for k in [2, 4, 8] {
            let p = predict_from_posterior(&model, &q, k, &mut rng::stream(4, "r")).unwrap();
            match p {
                PredictiveDistribution::Regression {
                    mean, epistemic, aleatoric,
                } => {
                    assert!((mean - at_mean).abs() < 1e-12);
                    assert!(epistemic >= 0.0 && aleatoric >= 0.0);
                }
                _ => panic!("expected regression"),
            }
        }
    }

    #[test]
    fn floor_variance_single_sample_matches_mean() {
        let model = Model::<f64>::init(&cfg(TaskKind::Classification { classes: 2 }, 4), 1);
        let q = GaussianPosterior::new(vec![0.2, -0.4, 1.0], vec![-8.0; 3]).unwrap();
        let mc = predict_from_posterior(&model, &q, 1, &mut rng::stream(1, "f")).unwrap();
        let point = predict_at_mean(&model, &q).unwrap();
        for (a, b) in mc.probs().unwrap().iter().zip(point.probs().unwrap()) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn entropy_examples() {
        let e = |p: Vec<f64>| predictive_entropy(&PredictiveDistribution::Classification { probs: p }).unwrap();
        assert_eq!(e(vec![0.0, 1.0, 0.0]), 0.0);
        assert!((e(vec![0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!((e(vec![0.9, 0.1]) - 0.32508).abs() < 1e-5);
        let reg = PredictiveDistribution::Regression {
            mean: 0.0,
            aleatoric: 1.0,
            epistemic: 0.0,
        };
        assert_eq!(predictive_entropy(&reg), Err(InferenceError::NotClassification));
    }

    #[test]
    fn selective_prediction_thresholds() {
        let p = PredictiveDistribution::Classification {
            probs: vec![0.2, 0.5, 0.3],
        };
        assert_eq!(selective_predict(&p, 3f64.ln()).unwrap(), Selection::Predict(1));
        assert_eq!(selective_predict(&p, 0.0).unwrap(), Selection::Abstain);
        let onehot = PredictiveDistribution::Classification {
            probs: vec![0.0, 1.0],
        };
        assert_eq!(selective_predict(&onehot, 0.0).unwrap(), Selection::Predict(1));
        assert!(selective_predict(&p, -1.0).is_err());
    }

    #[test]
    fn sequential_update_properties() {
        let model = Model::<f64>::init(&cfg(TaskKind::Classification { classes: 2 }, 4), 5);
        let r = record();
        let a = View::from_record(&r, Some(&[true, false])).unwrap();
        let b = View::from_record(&r, Some(&[false, true])).unwrap();
        let single = update_sequential(&model, &[a.clone()]).unwrap();
        let twice = update_sequential(&model, &[a.clone(), a.clone()]).unwrap();
        for (s, t) in single.variance().iter().zip(twice.variance()) {
            assert!(t < *s);
        }
        let ab = update_sequential(&model, &[a.clone(), b.clone()]).unwrap();
        let ba = update_sequential(&model, &[b, a]).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(update_sequential::<f64>(&model, &[]), Err(InferenceError::NoSnapshots));
    }

    #[test]
    fn deterministic_eval_ignores_sigma_head() {
        let mut model = Model::<f64>::init(&cfg(TaskKind::Classification { classes: 2 }, 4), 6);
        let mut records: Vec<PatientRecord> = (0..6)
            .map(|i| PatientRecord {
                id: format!("r{i}"),
                label: Some((i % 2) as f64),
                ..record()
            })
            .collect();
        records[3].modalities[0][1] = 2.0;
        let opts = EvalOptions {
            level: 0.0,
            variant: Variant::Deterministic,
            mc_samples: 8,
            bins: 15,
            seed: 1,
            cross_view: Some(ViewPolicy::default()),
        };
        let before = evaluate(&model, &records, &opts, "h").unwrap();
        model.encoder.logvar.w = model.encoder.logvar.w.map(|_| 0.37);
        let after = evaluate(&model, &records, &opts, "h").unwrap();
        assert_eq!(before, after);
        assert!(before.validate_ranges().is_ok());
        let dist = evaluate(
            &model,
            &records,
            &EvalOptions {
                variant: Variant::Distributional,
                ..opts
            },
            "h",
        )
        .unwrap();
        assert!(dist.get("mean_posterior_entropy").is_some());
    }
}
