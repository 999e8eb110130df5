//! Training objectives: masked reconstruction, partial-view consistency,
//! InfoNCE, KL-to-prior, supervised loss, variance band penalty, and their
//! weighted combination.
//!
//! Every term is a scalar tape node averaged over the batch. Terms whose
//! weight is zero are still evaluated for the breakdown but never joined to
//! the total, so they contribute exactly zero gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, NodeId, Tape, Tensor};
use crate::encoder::{encode_batch, EncodeError, EncodedBatch, PatientRecord};
use crate::gaussian::{self, GaussianError, PosteriorNodes, LOGVAR_MAX};
use crate::model::{DecoderVars, EncoderVars, Model, TaskKind};
use crate::scalar::Scalar;
use crate::viewgen::View;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("InfoNCE needs at least 2 records per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("views come from different records: {0} vs {1}")]
    RecordMismatch(String, String),
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error("label {label} is not a valid class index for {classes} classes")]
    BadLabel { label: f64, classes: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Tape(#[from] DiffError),
}

/// Divergence used for the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Skl,
    W2,
    KlForward,
}

/// What each view's posterior is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// The two sampled views against each other.
    Pairwise,
    /// Each view against the posterior of the full record.
    Prototype,
}

/// Latent summary fed to the InfoNCE similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityInput {
    Means,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_cons: f64,
    pub lambda_reg: f64,
    pub lambda_nce: f64,
    pub lambda_sup: f64,
    pub lambda_var: f64,
    pub tau: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Monte Carlo samples at inference.
    pub mc_samples: usize,
    /// Posterior samples averaged inside the supervised loss when only the
    /// head is trained. `1` trains on a single sample per record; larger
    /// values fit the head to the same Monte Carlo predictive used at
    /// inference.
    pub sup_samples: usize,
    pub divergence: DivergenceKind,
    pub consistency: ConsistencyMode,
    pub similarity: SimilarityInput,
    /// Point-estimate variant: log-variance pinned at 0 and no sampling noise.
    pub deterministic: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_cons: 1.0,
            lambda_reg: 0.01,
            lambda_nce: 0.1,
            lambda_sup: 0.0,
            lambda_var: 0.1,
            tau: 0.1,
            sigma_min: 0.05,
            sigma_max: 5.0,
            mc_samples: 8,
            sup_samples: 1,
            divergence: DivergenceKind::Skl,
            consistency: ConsistencyMode::Pairwise,
            similarity: SimilarityInput::Means,
            deterministic: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let lambdas = [
            self.lambda_rec,
            self.lambda_cons,
            self.lambda_reg,
            self.lambda_nce,
            self.lambda_sup,
            self.lambda_var,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(ObjectiveError::Weights("lambdas must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::Weights("tau must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(ObjectiveError::Weights("need 0 < sigma_min < sigma_max".into()));
        }
        if self.mc_samples == 0 {
            return Err(ObjectiveError::Weights("mc_samples must be at least 1".into()));
        }
        if self.sup_samples == 0 {
            return Err(ObjectiveError::Weights("sup_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encodes views for training; in deterministic mode the log-variance node
/// is replaced by a constant zero leaf.
pub fn encode_for_training<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    vars: &EncoderVars,
    views: &[&View],
    deterministic: bool,
) -> Result<EncodedBatch, ObjectiveError> {
    let mut enc = encode_batch(tape, model, vars, views)?;
    if deterministic {
        let shape = tape.shape(enc.posterior.log_var).to_vec();
        enc.posterior.log_var = tape.leaf(Tensor::zeros(&shape));
    }
    Ok(enc)
}

fn constant_rows<S: Scalar>(
    tape: &mut Tape<S>,
    rows: impl Iterator<Item = Vec<f64>>,
    cols: usize,
) -> Result<NodeId, DiffError> {
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        data.extend(row.into_iter().map(S::lit));
        n += 1;
    }
    Ok(tape.leaf(Tensor::matrix(n, cols, data)?))
}

/// Masked reconstruction: unit-variance Gaussian NLL (constant dropped) of
/// held-out entries, averaged over each view's held-out entries, then over
/// the batch. Views with nothing held out contribute 0.
pub fn loss_rec<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    dec: &DecoderVars,
    encoded: &EncodedBatch,
    views: &[&View],
    noise: Tensor<S>,
) -> Result<NodeId, ObjectiveError> {
    let rows = views.len();
    let counts: Vec<usize> = views.iter().map(|v| v.held_out_count()).collect();
    if counts.iter().all(|&c| c == 0) {
        return Ok(tape.leaf(Tensor::scalar(S::zero())));
    }
    let z = gaussian::sample_nodes(tape, encoded.posterior, noise)?;
    let mut total: Option<NodeId> = None;
    for (m, &p) in model.config.modality_dims.iter().enumerate() {
        if views.iter().all(|v| !v.hold[m].iter().any(|&h| h)) {
            continue;
        }
        let recon = &dec.recon[m];
        let mut pre = tape.matmul(z, recon.from_latent)?;
        if let Some(ctx) = recon.from_context {
            let c = tape.matmul(encoded.fused, ctx)?;
            pre = tape.add(pre, c)?;
        }
        let pre = tape.add_row(pre, recon.bias)?;
        let hidden = tape.tanh(pre)?;
        let xhat = tape.affine(hidden, recon.out.w, recon.out.b)?;

        let target = constant_rows(tape, views.iter().map(|v| v.held_out[m].clone()), p)?;
        let weight = constant_rows(
            tape,
            views.iter().zip(&counts).map(|(v, &n)| {
                v.hold[m]
                    .iter()
                    .map(|&h| if h { 1.0 / (2.0 * n as f64) } else { 0.0 })
                    .collect()
            }),
            p,
        )?;
        let diff = tape.sub(xhat, target)?;
        let sq = tape.square(diff)?;
        let weighted = tape.mul(sq, weight)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("some modality holds entries");
    Ok(tape.scale(total, S::one() / S::lit(rows as f64))?)
}

pub fn check_paired(a: &[&View], b: &[&View]) -> Result<(), ObjectiveError> {
    for (x, y) in a.iter().zip(b) {
        if x.record_id != y.record_id {
            return Err(ObjectiveError::RecordMismatch(
                x.record_id.clone(),
                y.record_id.clone(),
            ));
        }
    }
    if a.len() != b.len() {
        return Err(ObjectiveError::RecordMismatch(
            format!("{} views", a.len()),
            format!("{} views", b.len()),
        ));
    }
    Ok(())
}

/// Batch mean divergence between paired posteriors.
pub fn loss_cons<S: Scalar>(
    tape: &mut Tape<S>,
    a: PosteriorNodes,
    b: PosteriorNodes,
    kind: DivergenceKind,
) -> Result<NodeId, ObjectiveError> {
    Ok(match kind {
        DivergenceKind::Skl => gaussian::skl_nodes(tape, a, b)?,
        DivergenceKind::W2 => gaussian::w2_sq_nodes(tape, a, b)?,
        DivergenceKind::KlForward => gaussian::kl_nodes(tape, a, b)?,
    })
}

/// Rows scaled to unit length (norms floored at 1e-12 before inversion).
fn normalize_rows<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId, DiffError> {
    let (_, d) = tape.value(x).dims2().expect("rank-2");
    let ones_col = tape.leaf(Tensor::ones(&[d, 1]));
    let ones_row = tape.leaf(Tensor::ones(&[1, d]));
    let sq = tape.square(x)?;
    let norm2 = tape.matmul(sq, ones_col)?;
    let norm2 = tape.clamp_min(norm2, S::lit(1e-12))?;
    let log_norm2 = tape.log(norm2)?;
    let neg_half = tape.scale(log_norm2, S::lit(-0.5))?;
    let inv = tape.exp(neg_half)?;
    let inv = tape.matmul(inv, ones_row)?;
    tape.mul(x, inv)
}

/// InfoNCE with cosine similarity and in-batch negatives: row `i` of `a`
/// is the anchor, row `i` of `b` its positive, other rows of `b` negatives.
pub fn loss_nce<S: Scalar>(
    tape: &mut Tape<S>,
    a: NodeId,
    b: NodeId,
    tau: S,
) -> Result<NodeId, ObjectiveError> {
    let (rows, d) = tape.value(a).dims2().expect("rank-2");
    if rows < 2 {
        return Err(ObjectiveError::BatchTooSmall(rows));
    }
    let na = normalize_rows(tape, a)?;
    let nb = normalize_rows(tape, b)?;
    let inv_tau = S::one() / tau;
    let nbt = tape.transpose(nb)?;
    let sims = tape.matmul(na, nbt)?;
    let logits = tape.scale(sims, inv_tau)?;
    let lse = tape.logsumexp_rows(logits)?;
    let ones_col = tape.leaf(Tensor::ones(&[d, 1]));
    let prod = tape.mul(na, nb)?;
    let pos = tape.matmul(prod, ones_col)?;
    let pos = tape.scale(pos, inv_tau)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row)?)
}

/// Batch mean `KL(q || N(0, I))`.
pub fn loss_reg<S: Scalar>(tape: &mut Tape<S>, q: PosteriorNodes) -> Result<NodeId, ObjectiveError> {
    Ok(gaussian::kl_to_prior_nodes(tape, q)?)
}

/// Task head outputs for latent rows `z` (`[B, d]` → `[B, C]`).
pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    dec: &DecoderVars,
    z: NodeId,
) -> Result<NodeId, DiffError> {
    let x = match &dec.task.hidden {
        Some(h) => {
            let pre = tape.affine(z, h.w, h.b)?;
            tape.tanh(pre)?
        }
        None => z,
    };
    tape.affine(x, dec.task.out.w, dec.task.out.b)
}

fn selector<S: Scalar>(rows: usize, cols: usize, picks: &[usize]) -> Tensor<S> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for (r, &c) in picks.iter().enumerate() {
        t.data_mut()[r * cols + c] = S::one();
    }
    t
}

/// Supervised negative log-likelihood at latent rows `z`, averaged over rows.
///
/// Classification: softmax cross-entropy of `logits / temperature`.
/// Regression: `½[(y − m)²/v + log v]` with `log v` smoothly clamped.
pub fn loss_sup<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    dec: &DecoderVars,
    z: NodeId,
    labels: &[f64],
    temperature: S,
) -> Result<NodeId, ObjectiveError> {
    let ll = sup_log_lik_rows(tape, model, dec, z, labels, temperature)?;
    let mean = tape.mean(ll)?;
    Ok(tape.scale(mean, -S::one())?)
}

/// Negative log of the Monte Carlo predictive `1/K Σₖ p(y | zₖ)`, with
/// `zₖ = μ + σ ⊙ εₖ` for each noise tensor `εₖ`, averaged over rows.
///
/// With one noise tensor this equals [`loss_sup`] at that sample.
pub fn loss_sup_mc<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    dec: &DecoderVars,
    q: PosteriorNodes,
    noise: &[Tensor<S>],
    labels: &[f64],
) -> Result<NodeId, ObjectiveError> {
    let k = noise.len();
    if k == 0 {
        return Err(ObjectiveError::Weights("need at least one noise sample".into()));
    }
    let rows = labels.len();
    let mut stacked = None;
    for (j, eps) in noise.iter().enumerate() {
        let z = gaussian::sample_nodes(tape, q, eps.clone())?;
        let ll = sup_log_lik_rows(tape, model, dec, z, labels, S::one())?;
        let place = tape.leaf(selector(1, k, &[j]));
        let col = tape.matmul(ll, place)?;
        stacked = Some(match stacked {
            None => col,
            Some(acc) => tape.add(acc, col)?,
        });
    }
    let lse = tape.logsumexp_rows(stacked.expect("k > 0"))?;
    let log_k = tape.leaf(Tensor::full(&[rows, 1], S::lit((k as f64).ln())));
    let ll = tape.sub(lse, log_k)?;
    let mean = tape.mean(ll)?;
    Ok(tape.scale(mean, -S::one())?)
}

/// Per-row log-likelihood `[B, 1]`; the regression constant `−½ log 2π`
/// is dropped.
fn sup_log_lik_rows<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    dec: &DecoderVars,
    z: NodeId,
    labels: &[f64],
    temperature: S,
) -> Result<NodeId, ObjectiveError> {
    let rows = labels.len();
    let out = head_forward(tape, dec, z)?;
    match model.config.task {
        TaskKind::Classification { classes } => {
            let mut picks = Vec::with_capacity(rows);
            for &y in labels {
                if y < 0.0 || y.fract() != 0.0 || y as usize >= classes {
                    return Err(ObjectiveError::BadLabel { label: y, classes });
                }
                picks.push(y as usize);
            }
            let logits = tape.scale(out, S::one() / temperature)?;
            let lse = tape.logsumexp_rows(logits)?;
            let onehot = tape.leaf(selector(rows, classes, &picks));
            let picked = tape.mul(logits, onehot)?;
            let ones = tape.leaf(Tensor::ones(&[classes, 1]));
            let true_logit = tape.matmul(picked, ones)?;
            Ok(tape.sub(true_logit, lse)?)
        }
        TaskKind::Regression => {
            let mean_col = tape.leaf(selector::<S>(1, 2, &[0]).transpose()?);
            let var_col = tape.leaf(selector::<S>(1, 2, &[1]).transpose()?);
            let m = tape.matmul(out, mean_col)?;
            let raw = tape.matmul(out, var_col)?;
            let lv = clamp_log_var(tape, raw)?;
            let y = tape.leaf(Tensor::matrix(rows, 1, labels.iter().map(|&v| S::lit(v)).collect())?);
            let r = tape.sub(y, m)?;
            let r2 = tape.square(r)?;
            let neg_lv = tape.scale(lv, -S::one())?;
            let inv_v = tape.exp(neg_lv)?;
            let fit = tape.mul(r2, inv_v)?;
            let nll = tape.add(fit, lv)?;
            Ok(tape.scale(nll, S::lit(-0.5))?)
        }
    }
}

/// `LOGVAR_MAX · tanh(raw / LOGVAR_MAX)`.
pub fn clamp_log_var<S: Scalar>(tape: &mut Tape<S>, raw: NodeId) -> Result<NodeId, DiffError> {
    let cap = S::lit(LOGVAR_MAX);
    let squashed = tape.scale(raw, S::one() / cap)?;
    let squashed = tape.tanh(squashed)?;
    tape.scale(squashed, cap)
}

/// One record with its two sampled views.
#[derive(Debug, Clone)]
pub struct TrainingExample<'a> {
    pub record: &'a PatientRecord,
    pub a: View,
    pub b: View,
}

/// Unweighted value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub cons: f64,
    pub nce: f64,
    pub reg: f64,
    pub var: f64,
    pub sup: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec
            + w.lambda_cons * self.cons
            + w.lambda_nce * self.nce
            + w.lambda_reg * self.reg
            + w.lambda_var * self.var
            + w.lambda_sup * self.sup
    }

    /// Name of the first non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("total", self.total),
            ("rec", self.rec),
            ("cons", self.cons),
            ("nce", self.nce),
            ("reg", self.reg),
            ("var", self.var),
            ("sup", self.sup),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub struct TotalLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Reparameterization noise for both views of every example, `[B, d]` each.
#[derive(Debug, Clone)]
pub struct BatchNoise<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> BatchNoise<S> {
    /// Draws `B` rows of `d` standard normals for view a, then view b, per row.
    pub fn draw(rng: &mut impl Rng, rows: usize, d: usize) -> Self {
        let mut a = Vec::with_capacity(rows * d);
        let mut b = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            for _ in 0..d {
                a.push(S::lit(rng.sample(StandardNormal)));
            }
            for _ in 0..d {
                b.push(S::lit(rng.sample(StandardNormal)));
            }
        }
        Self {
            a: Tensor::matrix(rows, d, a).expect("shape matches"),
            b: Tensor::matrix(rows, d, b).expect("shape matches"),
        }
    }

    pub fn zeros(rows: usize, d: usize) -> Self {
        Self {
            a: Tensor::zeros(&[rows, d]),
            b: Tensor::zeros(&[rows, d]),
        }
    }
}

fn add_weighted<S: Scalar>(
    tape: &mut Tape<S>,
    acc: Option<NodeId>,
    term: NodeId,
    lambda: f64,
) -> Result<Option<NodeId>, DiffError> {
    if lambda == 0.0 {
        return Ok(acc);
    }
    let scaled = tape.scale(term, S::lit(lambda))?;
    Ok(Some(match acc {
        Some(a) => tape.add(a, scaled)?,
        None => scaled,
    }))
}

fn average_pair<S: Scalar>(tape: &mut Tape<S>, x: NodeId, y: NodeId) -> Result<NodeId, DiffError> {
    let s = tape.add(x, y)?;
    tape.scale(s, S::lit(0.5))
}

/// Weighted training objective over a batch, with noise drawn from `rng`.
pub fn loss_total<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    enc: &EncoderVars,
    dec: &DecoderVars,
    batch: &[TrainingExample<'_>],
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<TotalLoss, ObjectiveError> {
    let noise = if weights.deterministic {
        BatchNoise::zeros(batch.len(), model.config.latent_dim)
    } else {
        BatchNoise::draw(rng, batch.len(), model.config.latent_dim)
    };
    loss_total_with_noise(tape, model, enc, dec, batch, weights, noise)
}

/// [`loss_total`] with explicit noise.
pub fn loss_total_with_noise<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    enc: &EncoderVars,
    dec: &DecoderVars,
    batch: &[TrainingExample<'_>],
    weights: &LossWeights,
    noise: BatchNoise<S>,
) -> Result<TotalLoss, ObjectiveError> {
    weights.validate()?;
    let views_a: Vec<&View> = batch.iter().map(|e| &e.a).collect();
    let views_b: Vec<&View> = batch.iter().map(|e| &e.b).collect();
    check_paired(&views_a, &views_b)?;
    for e in batch {
        if e.record.id != e.a.record_id {
            return Err(ObjectiveError::RecordMismatch(
                e.record.id.clone(),
                e.a.record_id.clone(),
            ));
        }
    }

    let det = weights.deterministic;
    let qa = encode_for_training(tape, model, enc, &views_a, det)?;
    let qb = encode_for_training(tape, model, enc, &views_b, det)?;

    let rec_a = loss_rec(tape, model, dec, &qa, &views_a, noise.a.clone())?;
    let rec_b = loss_rec(tape, model, dec, &qb, &views_b, noise.b.clone())?;
    let rec = average_pair(tape, rec_a, rec_b)?;

    let cons = match weights.consistency {
        ConsistencyMode::Pairwise => {
            loss_cons(tape, qa.posterior, qb.posterior, weights.divergence)?
        }
        ConsistencyMode::Prototype => {
            let full: Vec<View> = batch
                .iter()
                .map(|e| View::from_record(e.record, None))
                .collect::<Result<_, _>>()
                .map_err(EncodeError::from)?;
            let full_refs: Vec<&View> = full.iter().collect();
            let qf = encode_for_training(tape, model, enc, &full_refs, det)?;
            let ca = loss_cons(tape, qa.posterior, qf.posterior, weights.divergence)?;
            let cb = loss_cons(tape, qb.posterior, qf.posterior, weights.divergence)?;
            average_pair(tape, ca, cb)?
        }
    };

    let nce = if batch.len() >= 2 {
        let (sa, sb) = match weights.similarity {
            SimilarityInput::Means => (qa.posterior.mean, qb.posterior.mean),
            SimilarityInput::Samples => (
                gaussian::sample_nodes(tape, qa.posterior, noise.a.clone())?,
                gaussian::sample_nodes(tape, qb.posterior, noise.b.clone())?,
            ),
        };
        Some(loss_nce(tape, sa, sb, S::lit(weights.tau))?)
    } else if weights.lambda_nce > 0.0 {
        return Err(ObjectiveError::BatchTooSmall(batch.len()));
    } else {
        None
    };

    let reg_a = loss_reg(tape, qa.posterior)?;
    let reg_b = loss_reg(tape, qb.posterior)?;
    let reg = average_pair(tape, reg_a, reg_b)?;

    let (lo, hi) = (S::lit(weights.sigma_min), S::lit(weights.sigma_max));
    let var_a = gaussian::var_penalty_nodes(tape, qa.posterior, lo, hi)?;
    let var_b = gaussian::var_penalty_nodes(tape, qb.posterior, lo, hi)?;
    let var = average_pair(tape, var_a, var_b)?;

    let labeled: Vec<usize> = (0..batch.len())
        .filter(|&i| batch[i].record.label.is_some())
        .collect();
    let sup = if weights.lambda_sup > 0.0 || !labeled.is_empty() {
        if labeled.len() < batch.len() && weights.lambda_sup > 0.0 && labeled.is_empty() {
            return Err(ObjectiveError::MissingLabel(batch[0].record.id.clone()));
        }
        if labeled.is_empty() {
            None
        } else {
            let z = gaussian::sample_nodes(tape, qa.posterior, noise.a.clone())?;
            let pick = tape.leaf(selector(labeled.len(), batch.len(), &labeled));
            let z = tape.matmul(pick, z)?;
            let labels: Vec<f64> = labeled
                .iter()
                .map(|&i| batch[i].record.label.expect("filtered"))
                .collect();
            Some(loss_sup(tape, model, dec, z, &labels, S::one())?)
        }
    } else {
        None
    };

    let mut total = None;
    total = add_weighted(tape, total, rec, weights.lambda_rec)?;
    total = add_weighted(tape, total, cons, weights.lambda_cons)?;
    if let Some(n) = nce {
        total = add_weighted(tape, total, n, weights.lambda_nce)?;
    }
    total = add_weighted(tape, total, reg, weights.lambda_reg)?;
    total = add_weighted(tape, total, var, weights.lambda_var)?;
    if let Some(s) = sup {
        total = add_weighted(tape, total, s, weights.lambda_sup)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(S::zero())),
    };

    let item = |id: Option<NodeId>| id.map_or(0.0, |n| tape.item(n).to_f64_lossy());
    let breakdown = LossBreakdown {
        total: item(Some(total)),
        rec: item(Some(rec)),
        cons: item(Some(cons)),
        nce: item(nce),
        reg: item(Some(reg)),
        var: item(Some(var)),
        sup: item(sup),
    };
    Ok(TotalLoss { total, breakdown })
}
