//! Dataset files, manifests, splits and content hashes.
//!
//! A dataset is a JSON Lines file with one record per line plus a sibling
//! `<stem>.manifest.json` describing its dimensions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::PatientRecord;
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 hex digest of bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    sha256_hex(serde_json::to_string(&v).expect("serializable").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: usize,
    pub latent_dim: Option<usize>,
    pub modality_dims: Vec<usize>,
    /// Hash of the generator spec that produced the data, if synthetic.
    pub spec_hash: Option<String>,
    pub config_hash: Option<String>,
    /// SHA-256 of the data file.
    pub data_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    id: String,
    modalities: BTreeMap<String, Vec<f64>>,
    mask: Vec<u8>,
    label: Option<f64>,
    z_true: Option<Vec<f64>>,
}

fn to_wire(r: &PatientRecord) -> WireRecord {
    WireRecord {
        id: r.id.clone(),
        modalities: r
            .modalities
            .iter()
            .enumerate()
            .map(|(m, v)| (format!("m{m}"), v.clone()))
            .collect(),
        mask: r.mask.iter().map(|&b| u8::from(b)).collect(),
        label: r.label,
        z_true: r.z_true.clone(),
    }
}

fn from_wire(w: WireRecord) -> Result<PatientRecord, String> {
    let count = w.modalities.len();
    let mut modalities = vec![Vec::new(); count];
    for (key, values) in w.modalities {
        let idx: usize = key
            .strip_prefix('m')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad modality key {key:?}"))?;
        if idx >= count {
            return Err(format!("modality keys must be m0..m{}", count - 1));
        }
        modalities[idx] = values;
    }
    if w.mask.len() != count {
        return Err(format!("mask has {} entries for {count} modalities", w.mask.len()));
    }
    let mask = w
        .mask
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("mask entries must be 0 or 1, got {other}")),
        })
        .collect::<Result<_, _>>()?;
    if modalities.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(PatientRecord {
        id: w.id,
        modalities,
        mask,
        label: w.label,
        z_true: w.z_true,
    })
}

/// Serializes records as JSON Lines.
pub fn records_to_jsonl(records: &[PatientRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &to_wire(r)).expect("serializable");
        out.push(b'\n');
    }
    out
}

pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest.json")
}

/// Writes `records` and their manifest; refuses to overwrite unless `force`.
pub fn write_dataset(
    path: &Path,
    records: &[PatientRecord],
    modality_dims: &[usize],
    latent_dim: Option<usize>,
    spec_hash: Option<String>,
    config_hash: Option<String>,
    force: bool,
) -> Result<DatasetManifest, DataError> {
    let mpath = manifest_path(path);
    for p in [path, mpath.as_path()] {
        if p.exists() && !force {
            return Err(DataError::Exists(p.to_path_buf()));
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let bytes = records_to_jsonl(records);
    fs::write(path, &bytes).map_err(io_err(path))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        records: records.len(),
        latent_dim,
        modality_dims: modality_dims.to_vec(),
        spec_hash,
        config_hash,
        data_sha256: sha256_hex(&bytes),
    };
    write_json(&mpath, &manifest)?;
    Ok(manifest)
}

/// Reads a dataset and checks every record against its manifest.
pub fn read_dataset(path: &Path) -> Result<(Vec<PatientRecord>, DatasetManifest), DataError> {
    let mpath = manifest_path(path);
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if sha256_hex(&bytes) != manifest.data_sha256 {
        return Err(DataError::Manifest(format!(
            "{} does not match the checksum in its manifest",
            path.display()
        )));
    }
    let mut records = Vec::with_capacity(manifest.records);
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let wire: WireRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let record = from_wire(wire).map_err(parse)?;
        let dims: Vec<usize> = record.modalities.iter().map(Vec::len).collect();
        if dims != manifest.modality_dims {
            return Err(parse(format!(
                "modality dims {dims:?} differ from manifest {:?}",
                manifest.modality_dims
            )));
        }
        if let (Some(d), Some(z)) = (manifest.latent_dim, &record.z_true) {
            if z.len() != d {
                return Err(parse(format!("z_true has {} entries, manifest says {d}", z.len())));
            }
        }
        records.push(record);
    }
    if records.len() != manifest.records {
        return Err(DataError::Manifest(format!(
            "manifest lists {} records, file has {}",
            manifest.records,
            records.len()
        )));
    }
    Ok((records, manifest))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Record indices of a deterministic train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Shuffles `0..n` with `seed` and cuts off `round(val·n)` validation and
    /// `round(test·n)` test indices; each part is returned in ascending order.
    pub fn new(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "split"));
        let n_val = ((val_fraction * n as f64).round() as usize).min(n);
        let n_test = ((test_fraction * n as f64).round() as usize).min(n - n_val);
        let mut val = order[..n_val].to_vec();
        let mut test = order[n_val..n_val + n_test].to_vec();
        let mut train = order[n_val + n_test..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
        Self { train, val, test }
    }

    pub fn select(records: &[PatientRecord], idx: &[usize]) -> Vec<PatientRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    }
}
