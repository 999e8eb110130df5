//! Masked multimodality records to diagonal Gaussian posteriors.
//!
//! Each modality passes through its own tanh MLP; a single learned query
//! attends over the observed modality embeddings (unobserved ones get an
//! excluded logit and exactly zero weight); linear heads emit the mean and a
//! smoothly clamped log-variance `LOGVAR_MAX · tanh(raw / LOGVAR_MAX)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, NodeId, Tape, Tensor};
use crate::gaussian::{GaussianError, GaussianPosterior, PosteriorNodes, LOGVAR_MAX};
use crate::model::{EncoderVars, Model};
use crate::scalar::Scalar;
use crate::viewgen::{View, ViewError};

/// Logit assigned to unobserved modalities. Finite so the tape stays finite;
/// large enough that its softmax weight underflows to exactly zero.
const EXCLUDED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("no evidence: record {0} has no observed modality under the effective mask")]
    NoEvidence(String),
    #[error("modality {modality}: expected {expected} features, got {got}")]
    FeatureDim {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("modality index {0} out of range")]
    ModalityIndex(usize),
    #[error("aggregate inputs do not match the observed modalities of the mask")]
    MaskMismatch,
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Tape(#[from] DiffError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// One partially observed multiview record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Feature vector per modality; unobserved modalities hold zeros.
    pub modalities: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub label: Option<f64>,
    pub z_true: Option<Vec<f64>>,
}

impl PatientRecord {
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Tape nodes produced by encoding a batch of views.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub posterior: PosteriorNodes,
    /// Fused embedding `h`, `[B, E]`.
    pub fused: NodeId,
    /// Attention weights, `[B, M]`.
    pub attention: NodeId,
}

fn unit_row<S: Scalar>(len: usize, hot: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[1, len]);
    t.data_mut()[hot] = S::one();
    t
}

fn check_views<S: Scalar>(model: &Model<S>, views: &[&View]) -> Result<(), EncodeError> {
    let dims = &model.config.modality_dims;
    for v in views {
        if v.observed_count() == 0 {
            return Err(EncodeError::NoEvidence(v.record_id.clone()));
        }
        if v.modalities() != dims.len() {
            return Err(ViewError::MaskLength {
                expected: dims.len(),
                got: v.modalities(),
            }
            .into());
        }
        for (m, &p) in dims.iter().enumerate() {
            if v.observed[m].len() != p {
                return Err(EncodeError::FeatureDim {
                    modality: m,
                    expected: p,
                    got: v.observed[m].len(),
                });
            }
        }
    }
    Ok(())
}

/// `tanh(x W₁ + b₁) W₂ + b₂` for one modality.
fn modality_mlp<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &EncoderVars,
    m: usize,
    x: NodeId,
) -> Result<NodeId, DiffError> {
    let mlp = &vars.modalities[m];
    let hidden = tape.affine(x, mlp.hidden.w, mlp.hidden.b)?;
    let hidden = tape.tanh(hidden)?;
    tape.affine(hidden, mlp.out.w, mlp.out.b)
}

/// Single-query attention pooling over per-modality embeddings (`[B, E]`
/// each, in modality order). `penalty` is `[B, M]`: 0 where observed,
/// [`EXCLUDED_LOGIT`] elsewhere. With a prior slot its embedding joins as an
/// always-observed last entry. Returns `(fused, weights)`; weights are
/// `[B, M]`, or `[B, M + 1]` with the prior slot last.
fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &EncoderVars,
    embeddings: &[NodeId],
    penalty: NodeId,
) -> Result<(NodeId, NodeId), DiffError> {
    let mut embeddings = embeddings.to_vec();
    let mut penalty = penalty;
    if let Some(prior) = vars.prior {
        let [b, m] = tape.shape(penalty)[..] else {
            unreachable!("penalty is a matrix")
        };
        let ones = tape.leaf(Tensor::ones(&[b, 1]));
        embeddings.push(tape.matmul(ones, prior)?);
        let mut pad = Tensor::zeros(&[m, m + 1]);
        for i in 0..m {
            pad.data_mut()[i * (m + 1) + i] = S::one();
        }
        let pad = tape.leaf(pad);
        penalty = tape.matmul(penalty, pad)?;
    }
    let embeddings = &embeddings[..];
    let m_count = embeddings.len();
    let e = tape.shape(embeddings[0])[1];
    let inv_sqrt_e = S::one() / S::lit(e as f64).sqrt();
    let mut logits: Option<NodeId> = None;
    let mut values = Vec::with_capacity(m_count);
    for (m, &emb) in embeddings.iter().enumerate() {
        let key = tape.matmul(emb, vars.key)?;
        let logit = tape.matmul(key, vars.query)?;
        let logit = tape.scale(logit, inv_sqrt_e)?;
        let place = tape.leaf(unit_row(m_count, m));
        let placed = tape.matmul(logit, place)?;
        logits = Some(match logits {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
        values.push(tape.matmul(emb, vars.value)?);
    }
    let logits = tape.add(logits.expect("at least one modality"), penalty)?;
    let weights = tape.softmax_rows(logits)?;
    let spread = tape.leaf(Tensor::ones(&[1, e]));
    let mut fused: Option<NodeId> = None;
    for (m, value) in values.into_iter().enumerate() {
        let pick = tape.leaf(unit_row::<S>(m_count, m).transpose()?);
        let w = tape.matmul(weights, pick)?;
        let w = tape.matmul(w, spread)?;
        let contrib = tape.mul(w, value)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    Ok((fused.expect("at least one modality"), weights))
}

fn heads<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &EncoderVars,
    fused: NodeId,
) -> Result<PosteriorNodes, DiffError> {
    let mean = tape.affine(fused, vars.mu.w, vars.mu.b)?;
    let raw = tape.affine(fused, vars.logvar.w, vars.logvar.b)?;
    let cap = S::lit(LOGVAR_MAX);
    let squashed = tape.scale(raw, S::one() / cap)?;
    let squashed = tape.tanh(squashed)?;
    let log_var = tape.scale(squashed, cap)?;
    Ok(PosteriorNodes { mean, log_var })
}

/// Encodes a batch of views on `tape` using already-bound parameters.
pub fn encode_batch<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    vars: &EncoderVars,
    views: &[&View],
) -> Result<EncodedBatch, EncodeError> {
    check_views(model, views)?;
    let b = views.len();
    let m_count = model.config.modalities();
    let mut embeddings = Vec::with_capacity(m_count);
    for (m, &p) in model.config.modality_dims.iter().enumerate() {
        let mut data = Vec::with_capacity(b * 2 * p);
        for v in views {
            data.extend(v.encoder_input(m).into_iter().map(S::lit));
        }
        let x = tape.leaf(Tensor::matrix(b, 2 * p, data)?);
        embeddings.push(modality_mlp(tape, vars, m, x)?);
    }
    let penalty_data = views
        .iter()
        .flat_map(|v| {
            v.modality_mask
                .iter()
                .map(|&obs| if obs { S::zero() } else { S::lit(EXCLUDED_LOGIT) })
        })
        .collect();
    let penalty = tape.leaf(Tensor::matrix(b, m_count, penalty_data)?);
    let (fused, attention) = attend(tape, vars, &embeddings, penalty)?;
    let posterior = heads(tape, vars, fused)?;
    Ok(EncodedBatch {
        posterior,
        fused,
        attention,
    })
}

/// Encodes many views in fixed-size chunks, returning plain posteriors.
pub fn encode_views<S: Scalar>(
    model: &Model<S>,
    views: &[&View],
) -> Result<Vec<GaussianPosterior<S>>, EncodeError> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(CHUNK) {
        let mut tape = Tape::new();
        let vars = model.bind_encoder(&mut tape);
        let enc = encode_batch(&mut tape, model, &vars, chunk)?;
        for i in 0..chunk.len() {
            out.push(enc.posterior.posterior(&tape, i)?);
        }
    }
    Ok(out)
}

/// Posterior for `record` under `record.mask ∧ mask_override`.
pub fn encode<S: Scalar>(
    model: &Model<S>,
    record: &PatientRecord,
    mask_override: Option<&[bool]>,
) -> Result<GaussianPosterior<S>, EncodeError> {
    let view = View::from_record(record, mask_override)?;
    if view.observed_count() == 0 {
        return Err(EncodeError::NoEvidence(record.id.clone()));
    }
    Ok(encode_views(model, &[&view])?.remove(0))
}

/// Embedding `h^(m)` of a fully observed modality vector.
pub fn encode_modality<S: Scalar>(
    model: &Model<S>,
    m: usize,
    x: &[f64],
) -> Result<Vec<S>, EncodeError> {
    let p = *model
        .config
        .modality_dims
        .get(m)
        .ok_or(EncodeError::ModalityIndex(m))?;
    if x.len() != p {
        return Err(EncodeError::FeatureDim {
            modality: m,
            expected: p,
            got: x.len(),
        });
    }
    let mut tape = Tape::new();
    let vars = model.bind_encoder(&mut tape);
    let input: Vec<S> = x
        .iter()
        .map(|&v| S::lit(v))
        .chain(std::iter::repeat(S::one()).take(p))
        .collect();
    let xn = tape.leaf(Tensor::matrix(1, 2 * p, input)?);
    let out = modality_mlp(&mut tape, &vars, m, xn)?;
    Ok(tape.value(out).data().to_vec())
}

/// Attention pooling of per-modality embeddings.
///
/// `embeddings` must list exactly the modalities flagged in `mask`, in any
/// order; they are sorted by modality index before pooling.
pub fn aggregate<S: Scalar>(
    model: &Model<S>,
    embeddings: &[(usize, Vec<S>)],
    mask: &[bool],
) -> Result<Vec<S>, EncodeError> {
    let m_count = model.config.modalities();
    let e = model.config.embed_dim;
    if mask.len() != m_count {
        return Err(ViewError::MaskLength {
            expected: m_count,
            got: mask.len(),
        }
        .into());
    }
    if embeddings.is_empty() {
        return Err(EncodeError::NoEvidence("<aggregate>".into()));
    }
    let mut sorted: Vec<&(usize, Vec<S>)> = embeddings.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    let listed: Vec<usize> = sorted.iter().map(|(m, _)| *m).collect();
    let observed: Vec<usize> = (0..m_count).filter(|&m| mask[m]).collect();
    if listed != observed {
        return Err(EncodeError::MaskMismatch);
    }

    let mut tape = Tape::new();
    let vars = model.bind_encoder(&mut tape);
    let mut nodes = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let data = match sorted.iter().find(|(k, _)| *k == m) {
            Some((_, v)) if v.len() == e => v.clone(),
            Some((_, v)) => {
                return Err(EncodeError::FeatureDim {
                    modality: m,
                    expected: e,
                    got: v.len(),
                })
            }
            None => vec![S::zero(); e],
        };
        nodes.push(tape.leaf(Tensor::matrix(1, e, data)?));
    }
    let penalty = mask
        .iter()
        .map(|&obs| if obs { S::zero() } else { S::lit(EXCLUDED_LOGIT) })
        .collect();
    let penalty = tape.leaf(Tensor::matrix(1, m_count, penalty)?);
    let (fused, _) = attend(&mut tape, &vars, &nodes, penalty)?;
    Ok(tape.value(fused).data().to_vec())
}
