//! Checkpoint files: `<prefix>.manifest.json` plus `<prefix>.params.bin`
//! holding every array as little-endian `f64` in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_json, write_json, DataError};
use crate::diffmath::Tensor;
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub config_hash: String,
    pub data_hash: String,
    pub step: u64,
    pub model: ModelConfig,
}

impl Manifest {
    pub fn element_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Differences against the layout `model` would produce, one per line.
    pub fn diff_layout(&self, model: &Model<f64>) -> Vec<String> {
        let mut out = Vec::new();
        let expected = model.named_tensors();
        if expected.len() != self.names.len() {
            out.push(format!(
                "array count: checkpoint {} vs config {}",
                self.names.len(),
                expected.len()
            ));
        }
        for ((name, shape), (ename, t)) in self.names.iter().zip(&self.shapes).zip(&expected) {
            if name != ename || shape.as_slice() != t.shape() {
                out.push(format!(
                    "{name} {shape:?} vs {ename} {:?}",
                    t.shape()
                ));
            }
        }
        out
    }
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, ".manifest.json")
}

pub fn params_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, ".params.bin")
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save(
    model: &Model<f64>,
    prefix: &Path,
    config_hash: &str,
    data_hash: &str,
    step: u64,
) -> Result<Manifest, CheckpointError> {
    let tensors = model.named_tensors();
    let mut blob = Vec::with_capacity(8 * model.parameter_count());
    for (_, t) in &tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        names: tensors.iter().map(|(n, _)| n.clone()).collect(),
        shapes: tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        dtype: "f64".into(),
        config_hash: config_hash.into(),
        data_hash: data_hash.into(),
        step,
        model: model.config.clone(),
    };
    let bin = params_path(prefix);
    if let Some(parent) = bin.parent() {
        fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(&bin, &blob).map_err(|source| CheckpointError::Io { path: bin, source })?;
    write_json(&manifest_path(prefix), &manifest)?;
    Ok(manifest)
}

pub fn load(prefix: &Path) -> Result<(Model<f64>, Manifest), CheckpointError> {
    let manifest: Manifest = read_json(&manifest_path(prefix))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Incompatible(format!(
            "version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(CheckpointError::Incompatible(format!("dtype {}", manifest.dtype)));
    }
    let bin = params_path(prefix);
    let blob = fs::read(&bin).map_err(|source| CheckpointError::Io {
        path: bin.clone(),
        source,
    })?;
    if blob.len() != 8 * manifest.element_count() {
        return Err(CheckpointError::Incompatible(format!(
            "{} holds {} bytes, manifest needs {}",
            bin.display(),
            blob.len(),
            8 * manifest.element_count()
        )));
    }
    let mut model = Model::<f64>::init(&manifest.model, 0);
    let diff = manifest.diff_layout(&model);
    if !diff.is_empty() {
        return Err(CheckpointError::Incompatible(diff.join("; ")));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let tensors = manifest
        .shapes
        .iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape.clone(), values.by_ref().take(n).collect())
                .expect("length checked")
        })
        .collect();
    model
        .load_tensors(tensors)
        .map_err(CheckpointError::Incompatible)?;
    Ok((model, manifest))
}

/// Rejects a checkpoint produced under a different configuration.
pub fn check_compatible(
    manifest: &Manifest,
    model: &ModelConfig,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let mut diffs = Vec::new();
    if &manifest.model != model {
        let a = serde_json::to_string(&manifest.model).expect("serializable");
        let b = serde_json::to_string(model).expect("serializable");
        diffs.push(format!("model: checkpoint {a} vs config {b}"));
    }
    if manifest.config_hash != config_hash {
        diffs.push(format!(
            "config_hash: checkpoint {} vs config {config_hash}",
            manifest.config_hash
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::Incompatible(diffs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let mut model = Model::<f64>::init(&ModelConfig::default(), 9);
        model.temperature = 1.2345678901234567;
        let manifest = save(&model, &prefix, "abc", "def", 42).unwrap();
        let (back, m2) = load(&prefix).unwrap();
        assert_eq!(back, model);
        assert_eq!(m2, manifest);
        assert_eq!(
            fs::metadata(params_path(&prefix)).unwrap().len() as usize,
            8 * manifest.element_count()
        );
        assert!(check_compatible(&m2, &model.config, "abc").is_ok());
        assert!(matches!(
            check_compatible(&m2, &model.config, "xyz"),
            Err(CheckpointError::Incompatible(_))
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let model = Model::<f64>::init(&ModelConfig::default(), 9);
        save(&model, &prefix, "a", "b", 0).unwrap();
        let bin = params_path(&prefix);
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(&prefix), Err(CheckpointError::Incompatible(_))));
    }
}
