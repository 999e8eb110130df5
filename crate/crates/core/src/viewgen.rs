//! Stochastic partial views of a record and deterministic missingness sweeps.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::PatientRecord;
use crate::rng::{self, StreamRng};

/// Redraws allowed before the force-keep fallback.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ViewError {
    #[error("record {0} has no observed modality")]
    NoObservedModality(String),
    #[error("mask has {got} flags, record has {expected} modalities")]
    MaskLength { expected: usize, got: usize },
    #[error("invalid view policy: {0}")]
    Policy(String),
    #[error("mask level {level} would drop all {modalities} modalities")]
    DropsEverything { level: f64, modalities: usize },
}

/// How training views are degraded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewPolicy {
    /// Per-modality drop probability, in `[0, 1)`.
    pub p_modality_drop: f64,
    /// Per-entry hold-out probability inside kept modalities.
    pub p_feature_drop: f64,
    pub min_keep: usize,
    pub seed_stream: u64,
}

impl Default for ViewPolicy {
    fn default() -> Self {
        Self {
            p_modality_drop: 0.3,
            p_feature_drop: 0.15,
            min_keep: 1,
            seed_stream: 0,
        }
    }
}

impl ViewPolicy {
    pub fn validate(&self) -> Result<(), ViewError> {
        if !(0.0..1.0).contains(&self.p_modality_drop) {
            return Err(ViewError::Policy("p_modality_drop must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_feature_drop) {
            return Err(ViewError::Policy("p_feature_drop must lie in [0, 1]".into()));
        }
        if self.min_keep == 0 {
            return Err(ViewError::Policy("min_keep must be at least 1".into()));
        }
        Ok(())
    }

    /// Random stream for one record and draw index under this policy.
    pub fn rng_for(&self, seed: u64, record_id: &str, draw: u64) -> StreamRng {
        rng::item_stream(seed ^ self.seed_stream, "view", record_id, draw)
    }
}

/// A degraded copy of a record together with its held-out content.
///
/// For every modality observed in the source record, `keep` and `hold`
/// partition its feature entries. Dropped modalities are held out entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub record_id: String,
    /// Modalities visible to the encoder.
    pub modality_mask: Vec<bool>,
    pub keep: Vec<Vec<bool>>,
    pub hold: Vec<Vec<bool>>,
    /// Record values where kept, 0 elsewhere.
    pub observed: Vec<Vec<f64>>,
    /// Record values where held out, 0 elsewhere.
    pub held_out: Vec<Vec<f64>>,
}

impl View {
    /// The record as-is, restricted to `mask ∧ record.mask`, with nothing held out.
    pub fn from_record(record: &PatientRecord, mask: Option<&[bool]>) -> Result<Self, ViewError> {
        let m = record.modalities.len();
        if let Some(mask) = mask {
            if mask.len() != m {
                return Err(ViewError::MaskLength {
                    expected: m,
                    got: mask.len(),
                });
            }
        }
        let effective: Vec<bool> = (0..m)
            .map(|i| record.mask[i] && mask.map_or(true, |mk| mk[i]))
            .collect();
        let mut view = Self::empty(record, effective);
        for (i, values) in record.modalities.iter().enumerate() {
            if view.modality_mask[i] {
                view.keep[i] = vec![true; values.len()];
                view.observed[i] = values.clone();
            }
        }
        Ok(view)
    }

    fn empty(record: &PatientRecord, modality_mask: Vec<bool>) -> Self {
        let zeros: Vec<Vec<f64>> = record.modalities.iter().map(|v| vec![0.0; v.len()]).collect();
        let falses: Vec<Vec<bool>> = record.modalities.iter().map(|v| vec![false; v.len()]).collect();
        Self {
            record_id: record.id.clone(),
            modality_mask,
            keep: falses.clone(),
            hold: falses,
            observed: zeros.clone(),
            held_out: zeros,
        }
    }

    pub fn modalities(&self) -> usize {
        self.modality_mask.len()
    }

    pub fn observed_count(&self) -> usize {
        self.modality_mask.iter().filter(|&&b| b).count()
    }

    pub fn held_out_count(&self) -> usize {
        self.hold.iter().flatten().filter(|&&h| h).count()
    }

    /// Encoder input for modality `m`: values then keep flags (`2·p_m`).
    pub fn encoder_input(&self, m: usize) -> Vec<f64> {
        let keep = self.keep[m].iter().map(|&k| if k { 1.0 } else { 0.0 });
        self.observed[m].iter().copied().chain(keep).collect()
    }
}

/// Draws one degraded view of `record`.
pub fn sample_view(
    record: &PatientRecord,
    policy: &ViewPolicy,
    rng: &mut impl Rng,
) -> Result<View, ViewError> {
    policy.validate()?;
    let observed: Vec<usize> = (0..record.mask.len()).filter(|&i| record.mask[i]).collect();
    if observed.is_empty() {
        return Err(ViewError::NoObservedModality(record.id.clone()));
    }
    let required = policy.min_keep.min(observed.len());

    let mut kept: Vec<usize> = Vec::new();
    let mut satisfied = false;
    for _ in 0..MAX_REDRAWS {
        kept = observed
            .iter()
            .copied()
            .filter(|_| !rng.gen_bool(policy.p_modality_drop))
            .collect();
        if kept.len() >= required {
            satisfied = true;
            break;
        }
    }
    if !satisfied {
        let mut dropped: Vec<usize> = observed.iter().copied().filter(|i| !kept.contains(i)).collect();
        dropped.shuffle(rng);
        kept.extend(dropped.into_iter().take(required - kept.len()));
        kept.sort_unstable();
    }

    let mut mask = vec![false; record.mask.len()];
    for &i in &kept {
        mask[i] = true;
    }
    let mut view = View::empty(record, mask);
    for &i in &observed {
        let values = &record.modalities[i];
        for (j, &x) in values.iter().enumerate() {
            let keep = view.modality_mask[i] && !rng.gen_bool(policy.p_feature_drop);
            if keep {
                view.keep[i][j] = true;
                view.observed[i][j] = x;
            } else {
                view.hold[i][j] = true;
                view.held_out[i][j] = x;
            }
        }
    }
    Ok(view)
}

/// Two independent views of the same record.
pub fn paired_views(
    record: &PatientRecord,
    policy: &ViewPolicy,
    rng: &mut impl Rng,
) -> Result<(View, View), ViewError> {
    let a = sample_view(record, policy, rng)?;
    let b = sample_view(record, policy, rng)?;
    Ok((a, b))
}

/// Deterministic evaluation masks dropping `round(level·M)` modalities.
///
/// Returns every drop pattern in lexicographic order of the dropped set;
/// record `i` uses pattern `i mod len` (see [`mask_for_record`]).
pub fn sweep_masks(modalities: usize, level: f64) -> Result<Vec<Vec<bool>>, ViewError> {
    if !(0.0..1.0).contains(&level) || modalities == 0 {
        return Err(ViewError::DropsEverything { level, modalities });
    }
    let scaled = level * modalities as f64;
    if scaled.ceil() as usize >= modalities {
        return Err(ViewError::DropsEverything { level, modalities });
    }
    let drop = scaled.round() as usize;
    Ok(combinations(modalities, drop)
        .into_iter()
        .map(|dropped| {
            let mut mask = vec![true; modalities];
            for i in dropped {
                mask[i] = false;
            }
            mask
        })
        .collect())
}

pub fn mask_for_record(masks: &[Vec<bool>], index: usize) -> &[bool] {
    &masks[index % masks.len()]
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}
