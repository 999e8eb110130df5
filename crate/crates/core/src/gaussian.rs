//! Diagonal Gaussian posteriors: divergences, entropy, sampling,
//! product-of-experts fusion and the variance band penalty.
//!
//! Each quantity exists twice: on plain [`GaussianPosterior`] values, and as
//! differentiable batch versions over `[B, d]` tape nodes ([`PosteriorNodes`]).
//! The two paths apply the same elementwise operations in the same order, so a
//! batch of one reproduces the plain value bit-for-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// Hard floor of the per-dimension log-variance.
pub const LOGVAR_MIN: f64 = -8.0;
/// Hard ceiling of the per-dimension log-variance.
pub const LOGVAR_MAX: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussianError {
    #[error("latent dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("log-variance {value} at index {index} outside [{LOGVAR_MIN}, {LOGVAR_MAX}] or non-finite")]
    LogVarOutOfRange { index: usize, value: f64 },
    #[error("non-finite mean at index {index}")]
    NonFiniteMean { index: usize },
    #[error("noise length {got} does not match latent dimension {expected}")]
    NoiseLength { expected: usize, got: usize },
    #[error("variance band inverted or non-positive: sigma_min={min}, sigma_max={max}")]
    InvalidBand { min: f64, max: f64 },
    #[error(transparent)]
    Tape(#[from] DiffError),
}

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior<S> {
    mean: Vec<S>,
    log_var: Vec<S>,
}

impl<S: Scalar> GaussianPosterior<S> {
    pub fn new(mean: Vec<S>, log_var: Vec<S>) -> Result<Self, GaussianError> {
        check_dims(mean.len(), log_var.len())?;
        if let Some(index) = mean.iter().position(|m| !m.is_finite()) {
            return Err(GaussianError::NonFiniteMean { index });
        }
        let (lo, hi) = (S::lit(LOGVAR_MIN), S::lit(LOGVAR_MAX));
        if let Some(index) = log_var
            .iter()
            .position(|&lv| !lv.is_finite() || lv < lo || lv > hi)
        {
            return Err(GaussianError::LogVarOutOfRange {
                index,
                value: log_var[index].to_f64_lossy(),
            });
        }
        Ok(Self { mean, log_var })
    }

    /// Builds a posterior, hard-clamping log-variances into the raw range.
    pub fn clamped(mean: Vec<S>, log_var: Vec<S>) -> Result<Self, GaussianError> {
        let (lo, hi) = (S::lit(LOGVAR_MIN), S::lit(LOGVAR_MAX));
        let log_var = log_var.into_iter().map(|lv| lv.max(lo).min(hi)).collect();
        Self::new(mean, log_var)
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![S::zero(); d],
            log_var: vec![S::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn log_var(&self) -> &[S] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<S> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<S> {
        let half = S::lit(0.5);
        self.log_var.iter().map(|&lv| (half * lv).exp()).collect()
    }

    /// Transfer feature: mean followed by log-variance.
    pub fn representation(&self) -> Vec<S> {
        self.mean.iter().chain(&self.log_var).copied().collect()
    }
}

/// The `N(0, I_d)` prior. Carries no data beyond its dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardPrior {
    pub d: usize,
}

impl StandardPrior {
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    pub fn as_posterior<S: Scalar>(&self) -> GaussianPosterior<S> {
        GaussianPosterior::standard(self.d)
    }
}

fn check_dims(left: usize, right: usize) -> Result<(), GaussianError> {
    if left == right {
        Ok(())
    } else {
        Err(GaussianError::DimMismatch { left, right })
    }
}

/// `KL(a || b)` in closed form.
pub fn kl<S: Scalar>(
    a: &GaussianPosterior<S>,
    b: &GaussianPosterior<S>,
) -> Result<S, GaussianError> {
    check_dims(a.dim(), b.dim())?;
    let mut total = S::zero();
    for i in 0..a.dim() {
        let (ma, mb) = (a.mean[i], b.mean[i]);
        let (la, lb) = (a.log_var[i], b.log_var[i]);
        let ratio = (la - lb).exp();
        let dm = mb - ma;
        let maha = (dm * dm) * (-lb).exp();
        let term = ((ratio + maha) - S::one()) + (lb - la);
        total = total + term;
    }
    Ok(total * S::lit(0.5))
}

/// Symmetrized KL, `KL(a||b) + KL(b||a)`.
pub fn skl<S: Scalar>(
    a: &GaussianPosterior<S>,
    b: &GaussianPosterior<S>,
) -> Result<S, GaussianError> {
    Ok(kl(a, b)? + kl(b, a)?)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_sq<S: Scalar>(
    a: &GaussianPosterior<S>,
    b: &GaussianPosterior<S>,
) -> Result<S, GaussianError> {
    check_dims(a.dim(), b.dim())?;
    let half = S::lit(0.5);
    let mut total = S::zero();
    for i in 0..a.dim() {
        let dm = a.mean[i] - b.mean[i];
        let ds = (a.log_var[i] * half).exp() - (b.log_var[i] * half).exp();
        total = total + (dm * dm + ds * ds);
    }
    Ok(total)
}

/// Differential entropy `½ Σ (log 2πe + log σ²)`.
pub fn entropy<S: Scalar>(a: &GaussianPosterior<S>) -> S {
    let c = S::lit((2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
    let half = S::lit(0.5);
    a.log_var
        .iter()
        .fold(S::zero(), |acc, &lv| acc + half * (c + lv))
}

/// `log det Σ` of the diagonal covariance.
pub fn log_det_cov<S: Scalar>(a: &GaussianPosterior<S>) -> S {
    a.log_var.iter().fold(S::zero(), |acc, &lv| acc + lv)
}

/// Reparameterized draw `μ + σ ⊙ noise`.
pub fn sample<S: Scalar>(a: &GaussianPosterior<S>, noise: &[S]) -> Result<Vec<S>, GaussianError> {
    if noise.len() != a.dim() {
        return Err(GaussianError::NoiseLength {
            expected: a.dim(),
            got: noise.len(),
        });
    }
    let half = S::lit(0.5);
    Ok(a.mean
        .iter()
        .zip(&a.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect())
}

/// Product-of-experts fusion with the standard prior counted exactly once.
///
/// Experts are summed in the order given. An empty list yields the prior.
pub fn poe_fuse<S: Scalar>(
    experts: &[GaussianPosterior<S>],
    prior: StandardPrior,
) -> Result<GaussianPosterior<S>, GaussianError> {
    let d = prior.d;
    for e in experts {
        check_dims(d, e.dim())?;
    }
    let mut precision = vec![S::one(); d];
    let mut weighted = vec![S::zero(); d];
    for e in experts {
        for i in 0..d {
            let tau = (-e.log_var[i]).exp();
            precision[i] = precision[i] + tau;
            weighted[i] = weighted[i] + tau * e.mean[i];
        }
    }
    let mean = weighted
        .iter()
        .zip(&precision)
        .map(|(&w, &p)| w / p)
        .collect();
    let log_var = precision.iter().map(|p| -p.ln()).collect();
    GaussianPosterior::clamped(mean, log_var)
}

/// [`poe_fuse`] after a stable sort by a caller-supplied key, which makes the
/// result bit-identical under any permutation of the input list.
pub fn poe_fuse_by_key<K: Ord, S: Scalar>(
    experts: &[(K, GaussianPosterior<S>)],
    prior: StandardPrior,
) -> Result<GaussianPosterior<S>, GaussianError> {
    let mut order: Vec<&(K, GaussianPosterior<S>)> = experts.iter().collect();
    order.sort_by(|x, y| x.0.cmp(&y.0));
    let sorted: Vec<GaussianPosterior<S>> = order.into_iter().map(|(_, g)| g.clone()).collect();
    poe_fuse(&sorted, prior)
}

/// Hinge penalty keeping every σᵢ inside `[sigma_min, sigma_max]`.
pub fn var_penalty<S: Scalar>(
    a: &GaussianPosterior<S>,
    sigma_min: S,
    sigma_max: S,
) -> Result<S, GaussianError> {
    check_band(sigma_min, sigma_max)?;
    let zero = S::zero();
    Ok(a.std_dev().into_iter().fold(zero, |acc, s| {
        acc + ((sigma_min - s).max(zero) + (s - sigma_max).max(zero))
    }))
}

fn check_band<S: Scalar>(sigma_min: S, sigma_max: S) -> Result<(), GaussianError> {
    if sigma_min > S::zero() && sigma_min < sigma_max {
        Ok(())
    } else {
        Err(GaussianError::InvalidBand {
            min: sigma_min.to_f64_lossy(),
            max: sigma_max.to_f64_lossy(),
        })
    }
}

/// A batch of `B` diagonal posteriors recorded on a tape, each node `[B, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosteriorNodes {
    pub mean: NodeId,
    pub log_var: NodeId,
}

impl PosteriorNodes {
    pub fn rows<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.shape(self.mean)[0]
    }

    pub fn dim<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.shape(self.mean)[1]
    }

    /// Reads row `i` back as a plain posterior.
    pub fn posterior<S: Scalar>(
        &self,
        tape: &Tape<S>,
        i: usize,
    ) -> Result<GaussianPosterior<S>, GaussianError> {
        GaussianPosterior::new(
            tape.value(self.mean).row(i).to_vec(),
            tape.value(self.log_var).row(i).to_vec(),
        )
    }

    /// Records a batch of plain posteriors as tape leaves.
    pub fn from_posteriors<S: Scalar>(
        tape: &mut Tape<S>,
        batch: &[GaussianPosterior<S>],
    ) -> Result<Self, GaussianError> {
        let means: Vec<Vec<S>> = batch.iter().map(|p| p.mean.clone()).collect();
        let lvs: Vec<Vec<S>> = batch.iter().map(|p| p.log_var.clone()).collect();
        Ok(Self {
            mean: tape.leaf(Tensor::from_rows(&means)?),
            log_var: tape.leaf(Tensor::from_rows(&lvs)?),
        })
    }
}

fn check_node_dims<S: Scalar>(
    tape: &Tape<S>,
    a: PosteriorNodes,
    b: PosteriorNodes,
) -> Result<(), GaussianError> {
    let (sa, sb) = (tape.shape(a.mean), tape.shape(b.mean));
    if sa != sb {
        let left = sa.last().copied().unwrap_or(0);
        let right = sb.last().copied().unwrap_or(0);
        return Err(if left != right {
            GaussianError::DimMismatch { left, right }
        } else {
            DiffError::Shape {
                op: "posterior batch",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            }
            .into()
        });
    }
    Ok(())
}

fn batch_mean<S: Scalar>(
    tape: &mut Tape<S>,
    per_entry: NodeId,
    rows: usize,
    factor: f64,
) -> Result<NodeId, GaussianError> {
    let total = tape.sum(per_entry)?;
    let scaled = tape.scale(total, S::lit(factor))?;
    Ok(tape.scale(scaled, S::one() / S::lit(rows as f64))?)
}

/// Batch mean of `KL(a_i || b_i)`.
pub fn kl_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    a: PosteriorNodes,
    b: PosteriorNodes,
) -> Result<NodeId, GaussianError> {
    check_node_dims(tape, a, b)?;
    let shape = tape.shape(a.mean).to_vec();
    let lv_diff = tape.sub(a.log_var, b.log_var)?;
    let ratio = tape.exp(lv_diff)?;
    let dm = tape.sub(b.mean, a.mean)?;
    let dm2 = tape.square(dm)?;
    let neg_lvb = tape.scale(b.log_var, -S::one())?;
    let inv_vb = tape.exp(neg_lvb)?;
    let maha = tape.mul(dm2, inv_vb)?;
    let s = tape.add(ratio, maha)?;
    let ones = tape.constant_full(&shape, S::one());
    let s = tape.sub(s, ones)?;
    let log_ratio = tape.sub(b.log_var, a.log_var)?;
    let s = tape.add(s, log_ratio)?;
    batch_mean(tape, s, shape[0], 0.5)
}

/// Batch mean of the symmetrized KL.
pub fn skl_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    a: PosteriorNodes,
    b: PosteriorNodes,
) -> Result<NodeId, GaussianError> {
    let ab = kl_nodes(tape, a, b)?;
    let ba = kl_nodes(tape, b, a)?;
    Ok(tape.add(ab, ba)?)
}

/// Batch mean of the squared 2-Wasserstein distance.
pub fn w2_sq_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    a: PosteriorNodes,
    b: PosteriorNodes,
) -> Result<NodeId, GaussianError> {
    check_node_dims(tape, a, b)?;
    let rows = tape.shape(a.mean)[0];
    let dm = tape.sub(a.mean, b.mean)?;
    let dm2 = tape.square(dm)?;
    let sa = std_nodes(tape, a)?;
    let sb = std_nodes(tape, b)?;
    let ds = tape.sub(sa, sb)?;
    let ds2 = tape.square(ds)?;
    let s = tape.add(dm2, ds2)?;
    batch_mean(tape, s, rows, 1.0)
}

/// Batch mean of `KL(q_i || N(0, I))`, `½ Σ (σ² + μ² − 1 − log σ²)`.
pub fn kl_to_prior_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    q: PosteriorNodes,
) -> Result<NodeId, GaussianError> {
    let shape = tape.shape(q.mean).to_vec();
    let var = tape.exp(q.log_var)?;
    let m2 = tape.square(q.mean)?;
    let s = tape.add(var, m2)?;
    let ones = tape.constant_full(&shape, S::one());
    let s = tape.sub(s, ones)?;
    let s = tape.sub(s, q.log_var)?;
    batch_mean(tape, s, shape[0], 0.5)
}

/// Batch mean of the σ band hinge penalty.
pub fn var_penalty_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    q: PosteriorNodes,
    sigma_min: S,
    sigma_max: S,
) -> Result<NodeId, GaussianError> {
    check_band(sigma_min, sigma_max)?;
    let shape = tape.shape(q.mean).to_vec();
    let sigma = std_nodes(tape, q)?;
    let lo = tape.constant_full(&shape, sigma_min);
    let hi = tape.constant_full(&shape, sigma_max);
    let below = tape.sub(lo, sigma)?;
    let below = tape.relu(below)?;
    let above = tape.sub(sigma, hi)?;
    let above = tape.relu(above)?;
    let s = tape.add(below, above)?;
    batch_mean(tape, s, shape[0], 1.0)
}

/// Per-entry standard deviations `exp(½ log σ²)`.
pub fn std_nodes<S: Scalar>(tape: &mut Tape<S>, q: PosteriorNodes) -> Result<NodeId, GaussianError> {
    let half = tape.scale(q.log_var, S::lit(0.5))?;
    Ok(tape.exp(half)?)
}

/// Reparameterized samples `μ + σ ⊙ ε` for fixed noise `ε` (`[B, d]`).
pub fn sample_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    q: PosteriorNodes,
    noise: Tensor<S>,
) -> Result<NodeId, GaussianError> {
    if noise.shape() != tape.shape(q.mean) {
        return Err(GaussianError::NoiseLength {
            expected: tape.value(q.mean).len(),
            got: noise.len(),
        });
    }
    let eps = tape.leaf(noise);
    let sigma = std_nodes(tape, q)?;
    let scaled = tape.mul(sigma, eps)?;
    Ok(tape.add(q.mean, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], lv: &[f64]) -> GaussianPosterior<f64> {
        GaussianPosterior::new(mean.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn kl_closed_form_examples() {
        let q = g(&[0.3, -1.0], &[0.2, -0.5]);
        assert_eq!(kl(&q, &q).unwrap(), 0.0);
        let a = g(&[0.0], &[0.0]);
        let b = g(&[1.0], &[0.0]);
        assert!((kl(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!((skl(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(skl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = g(&[0.0], &[0.0]);
        let b = g(&[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(
            kl(&a, &b),
            Err(GaussianError::DimMismatch { left: 1, right: 2 })
        );
        assert!(skl(&a, &b).is_err());
        assert!(w2_sq(&a, &b).is_err());
        assert!(poe_fuse(&[a.clone(), b], StandardPrior::new(1)).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = g(&[0.0], &[0.0]);
        assert_eq!(w2_sq(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_sq(&a, &g(&[3.0], &[0.0])).unwrap(), 9.0);
        let wide = g(&[0.0], &[4f64.ln()]);
        assert!((w2_sq(&a, &wide).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let half_log_2pie = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((entropy(&g(&[0.0], &[0.0])) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((entropy(&g(&[0.0, 0.0], &[0.0, 0.0])) - 2.0 * half_log_2pie).abs() < 1e-15);
        let base = g(&[0.0; 3], &[0.1, -0.4, 1.0]);
        let doubled = g(&[0.0; 3], &[0.1 + 2f64.ln(), -0.4 + 2f64.ln(), 1.0 + 2f64.ln()]);
        let gain = entropy(&doubled) - entropy(&base);
        assert!((gain - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det_cov(&g(&[0.0; 3], &[0.0; 3])), 0.0);
        assert_eq!(log_det_cov(&g(&[0.0; 2], &[1.0, 1.0])), 2.0);
    }

    #[test]
    fn sample_examples() {
        let q = g(&[1.0, -2.0], &[0.5, LOGVAR_MIN]);
        assert_eq!(sample(&q, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let noise = [0.3, -1.7];
        let z = sample(&q, &noise).unwrap();
        let bound = (-4f64).exp() * 1.7;
        assert!((z[1] + 2.0).abs() <= bound + 1e-15);
        assert!(matches!(
            sample(&q, &[0.0]),
            Err(GaussianError::NoiseLength { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn poe_examples() {
        let prior = StandardPrior::new(2);
        let fused = poe_fuse(&[GaussianPosterior::<f64>::standard(2)], prior).unwrap();
        for (&m, &v) in fused.mean().iter().zip(&fused.variance()) {
            assert_eq!(m, 0.0);
            assert!((v - 0.5).abs() < 1e-15);
        }
        let one = g(&[1.0], &[0.0]);
        let fused = poe_fuse(&[one.clone(), one], StandardPrior::new(1)).unwrap();
        assert!((fused.mean()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((fused.variance()[0] - 1.0 / 3.0).abs() < 1e-15);
        let empty: Vec<GaussianPosterior<f64>> = Vec::new();
        assert_eq!(
            poe_fuse(&empty, StandardPrior::new(3)).unwrap(),
            GaussianPosterior::standard(3)
        );
    }

    #[test]
    fn poe_variance_below_every_expert() {
        let experts = vec![g(&[0.1, 2.0], &[-1.0, 3.0]), g(&[-0.5, 0.0], &[2.0, -2.0])];
        let fused = poe_fuse(&experts, StandardPrior::new(2)).unwrap();
        for i in 0..2 {
            let min = experts.iter().map(|e| e.variance()[i]).fold(f64::INFINITY, f64::min);
            assert!(fused.variance()[i] <= min);
        }
    }

    #[test]
    fn var_penalty_examples() {
        let inside = g(&[0.0, 0.0], &[0.0, 1.0]);
        assert_eq!(var_penalty(&inside, 0.5, 2.0).unwrap(), 0.0);
        let narrow = g(&[0.0], &[2.0 * 0.1f64.ln()]);
        assert!((var_penalty(&narrow, 0.5, 2.0).unwrap() - 0.4).abs() < 1e-12);
        let wide = g(&[0.0], &[2.0 * 3f64.ln()]);
        assert!((var_penalty(&wide, 0.5, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            var_penalty(&inside, 2.0, 0.5),
            Err(GaussianError::InvalidBand { .. })
        ));
    }

    #[test]
    fn constructor_validates_range() {
        assert!(GaussianPosterior::new(vec![0.0], vec![8.5]).is_err());
        assert!(GaussianPosterior::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0, 1.0]).is_err());
        let c = GaussianPosterior::clamped(vec![0.0, 0.0], vec![-20.0, 20.0]).unwrap();
        assert_eq!(c.log_var(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn tape_path_matches_plain_path_bitwise() {
        let a = g(&[0.3, -1.2, 0.7], &[0.4, -0.9, 1.3]);
        let b = g(&[-0.1, 0.5, 0.2], &[-0.2, 0.6, 0.1]);
        let mut tape = Tape::new();
        let na = PosteriorNodes::from_posteriors(&mut tape, &[a.clone()]).unwrap();
        let nb = PosteriorNodes::from_posteriors(&mut tape, &[b.clone()]).unwrap();
        let k = kl_nodes(&mut tape, na, nb).unwrap();
        let s = skl_nodes(&mut tape, na, nb).unwrap();
        let w = w2_sq_nodes(&mut tape, na, nb).unwrap();
        let r = kl_to_prior_nodes(&mut tape, na).unwrap();
        let v = var_penalty_nodes(&mut tape, na, 1.1, 1.5).unwrap();
        assert_eq!(tape.item(k), kl(&a, &b).unwrap());
        assert_eq!(tape.item(s), skl(&a, &b).unwrap());
        assert_eq!(tape.item(w), w2_sq(&a, &b).unwrap());
        let prior = GaussianPosterior::standard(3);
        assert!((tape.item(r) - kl(&a, &prior).unwrap()).abs() < 1e-15);
        assert!((tape.item(v) - var_penalty(&a, 1.1, 1.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn skl_symmetric_bitwise() {
        let a = g(&[0.3, -1.2], &[0.4, -0.9]);
        let b = g(&[-0.1, 0.5], &[-0.2, 0.6]);
        assert_eq!(skl(&a, &b).unwrap(), skl(&b, &a).unwrap());
    }
}
