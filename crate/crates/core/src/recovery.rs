//! How closely learned posteriors match the exact posteriors of a
//! linear-Gaussian generator.
//!
//! The prior `N(0, I)` is rotation invariant, so a learned latent space is
//! identified only up to an orthogonal transform. The comparison first fits
//! the rotation `R` minimizing `Σ‖R·μ*ᵢ − μᵢ‖²` (orthogonal Procrustes) over
//! the evaluated records, maps each exact posterior into the learned frame,
//! keeps its diagonal, and averages the symmetric KL.

use nalgebra::DMatrix;

use crate::encoder::{encode, PatientRecord};
use crate::gaussian::{skl, GaussianPosterior};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synthdata::{Generator, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encode(#[from] crate::encoder::EncodeError),
    #[error(transparent)]
    Gaussian(#[from] crate::gaussian::GaussianError),
    #[error("latent dims differ: model {model}, generator {generator}")]
    Dim { model: usize, generator: usize },
    #[error("no records to compare")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct Recovery {
    /// Mean symmetric KL after alignment.
    pub mean_skl: f64,
    /// Mean symmetric KL without alignment.
    pub mean_skl_unaligned: f64,
    /// `R` with learned ≈ `R`·exact.
    pub rotation: DMatrix<f64>,
    pub mean_learned_log_var: f64,
    pub mean_exact_log_var: f64,
}

/// Orthogonal `R` minimizing `Σ‖R·aᵢ − bᵢ‖²` for row-stacked `a`, `b`.
pub fn procrustes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.transpose() * a;
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    u * v_t
}

fn diag_posterior(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<GaussianPosterior<f64>, RecoveryError> {
    let log_var = (0..cov.nrows()).map(|i| cov[(i, i)].ln()).collect();
    Ok(GaussianPosterior::new(mean, log_var)?)
}

/// Compares `model`'s posteriors on `records` with the generator's exact
/// posteriors under the records' own masks.
pub fn posterior_recovery<S: Scalar>(
    generator: &Generator,
    model: &Model<S>,
    records: &[PatientRecord],
) -> Result<Recovery, RecoveryError> {
    let d = generator.spec.latent_dim;
    if model.config.latent_dim != d {
        return Err(RecoveryError::Dim {
            model: model.config.latent_dim,
            generator: d,
        });
    }
    let usable: Vec<&PatientRecord> = records.iter().filter(|r| r.mask.iter().any(|&m| m)).collect();
    if usable.is_empty() {
        return Err(RecoveryError::Empty);
    }
    let mut learned = Vec::with_capacity(usable.len());
    let mut exact = Vec::with_capacity(usable.len());
    for r in &usable {
        let q = encode(model, r, None)?;
        learned.push(GaussianPosterior::new(
            q.mean().iter().map(|v| v.to_f64_lossy()).collect(),
            q.log_var().iter().map(|v| v.to_f64_lossy()).collect(),
        )?);
        exact.push(generator.exact_posterior(r, None)?);
    }
    let n = usable.len();
    let learned_means = DMatrix::from_fn(n, d, |i, j| learned[i].mean()[j]);
    let exact_means = DMatrix::from_fn(n, d, |i, j| exact[i].mean[j]);
    let rotation = procrustes(&exact_means, &learned_means);

    let (mut aligned, mut unaligned, mut exact_lv) = (0.0, 0.0, 0.0);
    for (q, e) in learned.iter().zip(&exact) {
        let mean = (&rotation * &e.mean).iter().copied().collect();
        let cov = &rotation * &e.covariance * rotation.transpose();
        aligned += skl(q, &diag_posterior(mean, &cov)?)?;
        let plain = diag_posterior(e.mean.iter().copied().collect(), &e.covariance)?;
        exact_lv += plain.log_var().iter().sum::<f64>() / d as f64;
        unaligned += skl(q, &plain)?;
    }
    let learned_lv = learned
        .iter()
        .map(|q| q.log_var().iter().sum::<f64>() / d as f64)
        .sum::<f64>();
    Ok(Recovery {
        mean_skl: aligned / n as f64,
        mean_skl_unaligned: unaligned / n as f64,
        rotation,
        mean_learned_log_var: learned_lv / n as f64,
        mean_exact_log_var: exact_lv / n as f64,
    })
}
