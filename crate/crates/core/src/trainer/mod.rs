//! Training loops: self-supervised pretraining, supervised fine-tuning in
//! three regimes, and post-hoc temperature calibration.
//!
//! Every random choice (shuffles, views, reparameterization noise) comes
//! from a stream named by the run seed and the epoch or step, so two runs
//! with the same seed produce identical logs and parameters.

pub mod checkpoint;
pub mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Gradients, Tape, Tensor};
use crate::encoder::PatientRecord;
use crate::gaussian;
use crate::inference::{self, antithetic_noise, head_at, posterior_samples, InferenceError};
use crate::metrics::PROB_CLIP;
use crate::model::{DecoderVars, EncoderVars, Model, TaskKind};
use crate::objectives::{
    encode_for_training, loss_sup, loss_sup_mc, loss_total_with_noise, BatchNoise, LossBreakdown, LossWeights,
    ObjectiveError, TrainingExample,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::viewgen::{paired_views, sample_view, View, ViewError, ViewPolicy};

pub use optim::{clip_global_norm, global_norm, lr_at, AdamW, OptimConfig, StepInfo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: term {term}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        term: String,
    },
    #[error("no labeled records to fine-tune on")]
    NoLabels,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    View(#[from] ViewError),
}

impl TrainError {
    /// True for failures caused by NaN/Inf values rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::NonFiniteGradient(_) | Self::NonFiniteLoss { .. } => true,
            Self::Objective(ObjectiveError::Tape(e))
            | Self::Objective(ObjectiveError::Encode(crate::encoder::EncodeError::Tape(e))) => {
                matches!(e, DiffError::NonFinite { .. } | DiffError::NonFiniteGradient { .. })
            }
            _ => false,
        }
    }
}

/// Everything a training loop needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub weights: LossWeights,
    pub policy: ViewPolicy,
    pub optim: OptimConfig,
    pub seed: u64,
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: [&str; 10] = [
    "epoch", "step", "total", "rec", "cons", "nce", "reg", "var", "sup", "lr",
];

/// Writes the loss log as CSV.
pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_CSV_HEADER)?;
    for row in log {
        let b = &row.breakdown;
        w.write_record([
            row.epoch.to_string(),
            row.step.to_string(),
            b.total.to_string(),
            b.rec.to_string(),
            b.cons.to_string(),
            b.nce.to_string(),
            b.reg.to_string(),
            b.var.to_string(),
            b.sup.to_string(),
            row.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameter names in update order (the calibration temperature excluded).
pub fn parameter_names<S: Scalar>(model: &Model<S>) -> Vec<String> {
    let mut names = Vec::new();
    model.encoder.map(&mut |n, _| names.push(n));
    model.decoder.map(&mut |n, _| names.push(n));
    names
}

fn parameters<S: Scalar>(model: &Model<S>) -> Vec<Tensor<S>> {
    let mut out = Vec::new();
    model.encoder.map(&mut |_, t| out.push(t.clone()));
    model.decoder.map(&mut |_, t| out.push(t.clone()));
    out
}

fn set_parameters<S: Scalar>(model: &mut Model<S>, params: Vec<Tensor<S>>) {
    let mut it = params.into_iter();
    model
        .encoder
        .for_each_mut(&mut |t| *t = it.next().expect("one tensor per slot"));
    model
        .decoder
        .for_each_mut(&mut |t| *t = it.next().expect("one tensor per slot"));
}

fn gradients<S: Scalar>(
    grads: &Gradients<S>,
    enc: &EncoderVars,
    dec: &DecoderVars,
) -> Vec<Tensor<S>> {
    let mut out = Vec::new();
    enc.map(&mut |_, &id| out.push(grads.get(id)));
    dec.map(&mut |_, &id| out.push(grads.get(id)));
    out
}

/// Shuffled minibatches for one epoch. A trailing batch of a single record
/// is merged into the previous one so contrastive terms stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::item_stream(seed, "shuffle", "", epoch as u64));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[derive(Default)]
struct Accumulator {
    sum: LossBreakdown,
    weight: f64,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown, w: usize) {
        let w = w as f64;
        let s = &mut self.sum;
        s.total += w * b.total;
        s.rec += w * b.rec;
        s.cons += w * b.cons;
        s.nce += w * b.nce;
        s.reg += w * b.reg;
        s.var += w * b.var;
        s.sup += w * b.sup;
        self.weight += w;
    }

    fn mean(&self) -> LossBreakdown {
        if self.weight == 0.0 {
            return LossBreakdown::default();
        }
        let w = self.weight;
        let s = &self.sum;
        LossBreakdown {
            total: s.total / w,
            rec: s.rec / w,
            cons: s.cons / w,
            nce: s.nce / w,
            reg: s.reg / w,
            var: s.var / w,
            sup: s.sup / w,
        }
    }
}

fn views_for<'a>(
    records: &'a [PatientRecord],
    idx: &[usize],
    policy: &ViewPolicy,
    seed: u64,
    draw: u64,
) -> Result<Vec<TrainingExample<'a>>, ViewError> {
    idx.iter()
        .map(|&i| {
            let r = &records[i];
            let (a, b) = paired_views(r, policy, &mut policy.rng_for(seed, &r.id, draw))?;
            Ok(TrainingExample { record: r, a, b })
        })
        .collect()
}

fn noise_for<S: Scalar>(weights: &LossWeights, seed: u64, label: &str, index: u64, rows: usize, d: usize) -> BatchNoise<S> {
    if weights.deterministic {
        BatchNoise::zeros(rows, d)
    } else {
        BatchNoise::draw(&mut rng::item_stream(seed, label, "", index), rows, d)
    }
}

/// Validation loss terms on fixed views and noise.
pub fn validation_loss<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    opts: &TrainOptions,
) -> Result<LossBreakdown, TrainError> {
    let weights = LossWeights {
        lambda_nce: 0.0,
        ..opts.weights.clone()
    };
    let view_seed = rng::child_seed(opts.seed, "validation", 0);
    let idx: Vec<usize> = (0..records.len()).collect();
    let mut acc = Accumulator::default();
    for (c, chunk) in idx.chunks(opts.optim.batch_size.max(1)).enumerate() {
        let batch = views_for(records, chunk, &opts.policy, view_seed, 0)?;
        let noise = noise_for(&weights, opts.seed, "validation.noise", c as u64, chunk.len(), model.config.latent_dim);
        let mut tape = Tape::new();
        let enc = model.bind_encoder(&mut tape);
        let dec = model.bind_decoder(&mut tape);
        let out = loss_total_with_noise(&mut tape, model, &enc, &dec, &batch, &weights, noise)?;
        acc.add(&out.breakdown, chunk.len());
    }
    Ok(acc.mean())
}

/// Model-selection score for pretraining: held-out reconstruction plus
/// consistency, each weighted by its configured λ (the plain sum at the
/// default weights).
pub fn validation_score(b: &LossBreakdown, weights: &LossWeights) -> f64 {
    weights.lambda_rec * b.rec + weights.lambda_cons * b.cons
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub model: Model<S>,
    pub best: Model<S>,
    /// Epoch of `best` (0 = initialization).
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Validation terms before training and after every epoch.
    pub validation: Vec<LossBreakdown>,
    pub steps: u64,
}

fn check_finite(b: &LossBreakdown, epoch: usize, step: u64) -> Result<(), TrainError> {
    match b.non_finite_term() {
        Some(term) => Err(TrainError::NonFiniteLoss {
            epoch,
            step,
            term: term.to_string(),
        }),
        None => Ok(()),
    }
}

/// Self-supervised pretraining over `train`, selecting the best epoch on `val`.
pub fn pretrain<S: Scalar>(
    init: Model<S>,
    train: &[PatientRecord],
    val: &[PatientRecord],
    opts: &TrainOptions,
) -> Result<PretrainOutcome<S>, TrainError> {
    opts.optim.validate().map_err(TrainError::Config)?;
    opts.weights.validate()?;
    opts.policy.validate()?;
    let mut model = init;
    let epochs = if train.len() < 2 { 0 } else { opts.optim.epochs };
    let per_epoch = epoch_batches(train.len(), opts.optim.batch_size, opts.seed, 0).len() as u64;
    let total = per_epoch * epochs as u64;
    let names = parameter_names(&model);
    let shapes: Vec<Vec<usize>> = parameters(&model).iter().map(|t| t.shape().to_vec()).collect();
    let trainable = vec![true; names.len()];
    let mut opt = AdamW::new(&opts.optim, opts.optim.lr, &shapes, total);

    let mut validation = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    if !val.is_empty() {
        let v = validation_loss(&model, val, opts)?;
        best_score = validation_score(&v, &opts.weights);
        validation.push(v);
    }

    let d = model.config.latent_dim;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut acc = Accumulator::default();
        for batch_idx in epoch_batches(train.len(), opts.optim.batch_size, opts.seed, epoch) {
            let batch = views_for(train, &batch_idx, &opts.policy, opts.seed, epoch as u64)?;
            let noise = noise_for(&opts.weights, opts.seed, "noise", opt.step, batch.len(), d);
            let mut tape = Tape::new();
            let enc = model.bind_encoder(&mut tape);
            let dec = model.bind_decoder(&mut tape);
            let out = loss_total_with_noise(&mut tape, &model, &enc, &dec, &batch, &opts.weights, noise)
                .map_err(|e| numerical_context(e, epoch, opt.step))?;
            check_finite(&out.breakdown, epoch, opt.step)?;
            let grads = tape
                .backward(out.total)
                .map_err(|e| numerical_context(e.into(), epoch, opt.step))?;
            let mut g = gradients(&grads, &enc, &dec);
            let mut params = parameters(&model);
            opt.update(&mut params, &mut g, &names, &trainable)?;
            set_parameters(&mut model, params);
            acc.add(&out.breakdown, batch.len());
        }
        log.push(EpochLog {
            epoch,
            step: opt.step,
            breakdown: acc.mean(),
            lr: opt.current_lr(),
        });
        if !val.is_empty() {
            let v = validation_loss(&model, val, opts)?;
            let score = validation_score(&v, &opts.weights);
            if score < best_score {
                best_score = score;
                best = model.clone();
                best_epoch = epoch;
            }
            validation.push(v);
        }
    }
    if val.is_empty() {
        best = model.clone();
        best_epoch = epochs;
    }
    Ok(PretrainOutcome {
        model,
        best,
        best_epoch,
        log,
        validation,
        steps: opt.step,
    })
}

fn numerical_context(e: ObjectiveError, epoch: usize, step: u64) -> TrainError {
    match &e {
        ObjectiveError::Tape(DiffError::NonFinite { op })
        | ObjectiveError::Encode(crate::encoder::EncodeError::Tape(DiffError::NonFinite { op })) => {
            TrainError::NonFiniteLoss {
                epoch,
                step,
                term: format!("primitive {op}"),
            }
        }
        _ => TrainError::Objective(e),
    }
}

/// Fine-tuning regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Only the task head trains.
    Frozen,
    /// Task head, then a logit temperature fitted on a calibration split.
    HeadOnly,
    /// Every parameter trains on the full objective with `λ_sup = 1`.
    Full,
}

impl std::str::FromStr for FinetuneMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "head-only" | "head_only" => Ok(Self::HeadOnly),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown fine-tune mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S> {
    pub model: Model<S>,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Supervised loss on one policy view per record; gradients reach whatever
/// the caller marks trainable.
fn head_batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    enc: &EncoderVars,
    dec: &DecoderVars,
    views: &[&View],
    labels: &[f64],
    noise: &[Tensor<S>],
    deterministic: bool,
) -> Result<crate::objectives::TotalLoss, ObjectiveError> {
    let q = encode_for_training(tape, model, enc, views, deterministic)?;
    let loss = match noise {
        [one] => {
            let z = gaussian::sample_nodes(tape, q.posterior, one.clone())?;
            loss_sup(tape, model, dec, z, labels, S::one())?
        }
        many => loss_sup_mc(tape, model, dec, q.posterior, many, labels)?,
    };
    let sup = tape.item(loss).to_f64_lossy();
    Ok(crate::objectives::TotalLoss {
        total: loss,
        breakdown: LossBreakdown {
            total: sup,
            sup,
            ..LossBreakdown::default()
        },
    })
}

/// Noise for the head-only loss: the batch's own draw, plus
/// `sup_samples − 1` further draws from a separate stream.
fn head_noise<S: Scalar>(weights: &LossWeights, first: Tensor<S>, seed: u64, step: u64, d: usize) -> Vec<Tensor<S>> {
    let rows = first.shape()[0];
    let mut out = vec![first];
    if weights.deterministic {
        return out;
    }
    let mut stream = rng::item_stream(seed, "noise-sup", "", step);
    for _ in 1..weights.sup_samples {
        out.push(BatchNoise::draw(&mut stream, rows, d).a);
    }
    out
}

/// Supervised fine-tuning on the labeled records of `train`; `calibration`
/// is used only by [`FinetuneMode::HeadOnly`] to fit the temperature.
pub fn finetune<S: Scalar>(
    init: Model<S>,
    train: &[PatientRecord],
    calibration: &[PatientRecord],
    mode: FinetuneMode,
    opts: &TrainOptions,
) -> Result<FinetuneOutcome<S>, TrainError> {
    opts.optim.validate().map_err(TrainError::Config)?;
    opts.weights.validate()?;
    opts.policy.validate()?;
    let labeled: Vec<PatientRecord> = train.iter().filter(|r| r.label.is_some()).cloned().collect();
    let epochs = opts.optim.finetune_epochs;
    if epochs > 0 && labeled.len() < 2 {
        return Err(TrainError::NoLabels);
    }
    let mut model = init;
    let names = parameter_names(&model);
    let shapes: Vec<Vec<usize>> = parameters(&model).iter().map(|t| t.shape().to_vec()).collect();
    let trainable: Vec<bool> = match mode {
        FinetuneMode::Full => vec![true; names.len()],
        FinetuneMode::Frozen | FinetuneMode::HeadOnly => {
            names.iter().map(|n| n.starts_with("task.")).collect()
        }
    };
    let weights = LossWeights {
        lambda_sup: 1.0,
        ..opts.weights.clone()
    };
    let seed = rng::child_seed(opts.seed, "finetune", 0);
    let per_epoch = if labeled.len() < 2 {
        0
    } else {
        epoch_batches(labeled.len(), opts.optim.batch_size, seed, 0).len() as u64
    };
    let total = per_epoch * epochs as u64;
    let mut opt = AdamW::new(&opts.optim, opts.optim.finetune_lr, &shapes, total);
    let d = model.config.latent_dim;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut acc = Accumulator::default();
        for batch_idx in epoch_batches(labeled.len(), opts.optim.batch_size, seed, epoch) {
            let noise = noise_for(&weights, seed, "noise", opt.step, batch_idx.len(), d);
            let mut tape = Tape::new();
            let enc = model.bind_encoder(&mut tape);
            let dec = model.bind_decoder(&mut tape);
            let out = match mode {
                FinetuneMode::Full => {
                    let batch = views_for(&labeled, &batch_idx, &opts.policy, seed, epoch as u64)?;
                    loss_total_with_noise(&mut tape, &model, &enc, &dec, &batch, &weights, noise)
                }
                FinetuneMode::Frozen | FinetuneMode::HeadOnly => {
                    let views: Vec<View> = batch_idx
                        .iter()
                        .map(|&i| {
                            let r = &labeled[i];
                            sample_view(r, &opts.policy, &mut opts.policy.rng_for(seed, &r.id, epoch as u64))
                        })
                        .collect::<Result<_, _>>()?;
                    let refs: Vec<&View> = views.iter().collect();
                    let labels: Vec<f64> = batch_idx
                        .iter()
                        .map(|&i| labeled[i].label.expect("filtered"))
                        .collect();
                    head_batch_loss(
                        &mut tape,
                        &model,
                        &enc,
                        &dec,
                        &refs,
                        &labels,
                        &head_noise(&weights, noise.a, seed, opt.step, d),
                        weights.deterministic,
                    )
                }
            }
            .map_err(|e| numerical_context(e, epoch, opt.step))?;
            check_finite(&out.breakdown, epoch, opt.step)?;
            let grads = tape
                .backward(out.total)
                .map_err(|e| numerical_context(e.into(), epoch, opt.step))?;
            let mut g = gradients(&grads, &enc, &dec);
            let mut params = parameters(&model);
            opt.update(&mut params, &mut g, &names, &trainable)?;
            set_parameters(&mut model, params);
            acc.add(&out.breakdown, batch_idx.len());
        }
        log.push(EpochLog {
            epoch,
            step: opt.step,
            breakdown: acc.mean(),
            lr: opt.current_lr(),
        });
    }
    if mode == FinetuneMode::HeadOnly {
        model.temperature = S::lit(calibrate_temperature(&model, calibration, &opts.weights, seed)?);
    }
    Ok(FinetuneOutcome {
        model,
        log,
        steps: opt.step,
    })
}

/// Fits the logit temperature on `records` (each under its own mask).
/// Regression heads and empty calibration sets keep temperature 1.
pub fn calibrate_temperature<S: Scalar>(
    model: &Model<S>,
    records: &[PatientRecord],
    weights: &LossWeights,
    seed: u64,
) -> Result<f64, TrainError> {
    if !matches!(model.config.task, TaskKind::Classification { .. }) {
        return Ok(1.0);
    }
    let labeled: Vec<&PatientRecord> = records.iter().filter(|r| r.label.is_some()).collect();
    if labeled.is_empty() {
        return Ok(1.0);
    }
    let views: Vec<View> = labeled
        .iter()
        .map(|r| View::from_record(r, None))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&View> = views.iter().collect();
    let posteriors = crate::encoder::encode_views(model, &refs).map_err(InferenceError::from)?;
    let k = if weights.deterministic { 1 } else { weights.mc_samples };
    let mut zs = Vec::with_capacity(labeled.len() * k);
    for (r, q) in labeled.iter().zip(&posteriors) {
        if weights.deterministic {
            zs.push(q.mean().to_vec());
        } else {
            let mut stream = rng::item_stream(seed, "calibration", &r.id, 0);
            zs.extend(posterior_samples(q, &antithetic_noise(&mut stream, k, q.dim()))?);
        }
    }
    let outputs = head_at(model, &zs)?;
    let per_record: Vec<Vec<Vec<f64>>> = outputs.chunks(k).map(<[Vec<f64>]>::to_vec).collect();
    let labels: Vec<usize> = labeled
        .iter()
        .map(|r| r.label.expect("filtered") as usize)
        .collect();
    Ok(fit_temperature(&model.config.task, &per_record, &labels))
}

fn calibration_nll(task: &TaskKind, outputs: &[Vec<Vec<f64>>], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (o, &y) in outputs.iter().zip(labels) {
        let p = inference::combine_outputs(task, o, t);
        let py = p.probs().expect("classification")[y];
        total -= py.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln();
    }
    total / labels.len().max(1) as f64
}

/// Temperature minimizing the NLL of the sample-averaged softmax, by
/// golden-section search over `log T ∈ [log 0.05, log 20]`.
pub fn fit_temperature(task: &TaskKind, outputs: &[Vec<Vec<f64>>], labels: &[usize]) -> f64 {
    let f = |u: f64| calibration_nll(task, outputs, labels, u.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.05f64.ln(), 20f64.ln());
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    (0.5 * (a + b)).exp()
}
