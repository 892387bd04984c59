//! On-disk artifacts: hashed parameter payloads and stage manifests.

use crate::autograd::ParamSet;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    #[error("hash mismatch for {}: manifest says {expected}, file hashes to {actual}", path.display())]
    HashMismatch { path: PathBuf, expected: String, actual: String },
    #[error("malformed artifact {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read(path: &Path) -> Result<Vec<u8>, ArtifactError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ArtifactError::Missing { path: path.to_path_buf(), hint: "run the producing stage first".into() }
        } else {
            ArtifactError::Io { path: path.to_path_buf(), source }
        }
    })
}

pub fn read_text(path: &Path) -> Result<String, ArtifactError> {
    String::from_utf8(read(path)?).map_err(|_| ArtifactError::Format { path: path.to_path_buf(), reason: "not UTF-8".into() })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| ArtifactError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| ArtifactError::Io { path: path.to_path_buf(), source })
}

pub fn hash_file(path: &Path) -> Result<String, ArtifactError> {
    Ok(sha256_hex(&read(path)?))
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ArtifactError> {
    serde_json::from_str(text).map_err(|e| ArtifactError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Describes a flat little-endian f64 payload holding tensors in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub kind: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub payload: String,
    pub payload_sha256: String,
    pub meta: serde_json::Value,
}

fn payload_path(manifest: &Path, name: &str) -> PathBuf {
    manifest.with_file_name(name)
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_params(stem: &Path, kind: &str, params: &ParamSet, meta: serde_json::Value) -> Result<ParamsManifest, ArtifactError> {
    let mut payload = Vec::with_capacity(params.scalar_count() * 8);
    for m in params.values() {
        payload.extend(m.to_le_bytes());
    }
    let bin = stem.with_extension("bin");
    let manifest = ParamsManifest {
        kind: kind.to_string(),
        dtype: "f64-le".into(),
        tensors: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows, cols: m.cols })
            .collect(),
        payload: bin.file_name().unwrap().to_string_lossy().into_owned(),
        payload_sha256: sha256_hex(&payload),
        meta,
    };
    write(&bin, &payload)?;
    write(&stem.with_extension("json"), to_json(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Reads a parameter artifact, verifying the payload hash.
pub fn load_params(stem: &Path, kind: &str) -> Result<(ParamsManifest, Vec<(String, Matrix)>), ArtifactError> {
    let mpath = stem.with_extension("json");
    let manifest: ParamsManifest = from_json(&mpath, &read_text(&mpath)?)?;
    let fmt = |reason: String| ArtifactError::Format { path: mpath.clone(), reason };
    if manifest.kind != kind {
        return Err(fmt(format!("expected a {kind} artifact, found {}", manifest.kind)));
    }
    if manifest.dtype != "f64-le" {
        return Err(fmt(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bin = payload_path(&mpath, &manifest.payload);
    let bytes = read(&bin)?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.payload_sha256 {
        return Err(ArtifactError::HashMismatch { path: bin, expected: manifest.payload_sha256.clone(), actual });
    }
    let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() != total * 8 {
        return Err(fmt(format!("payload has {} bytes, tensors need {}", bytes.len(), total * 8)));
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), Matrix::from_vec(t.rows, t.cols, vals.by_ref().take(t.rows * t.cols).collect())))
        .collect();
    Ok((manifest, tensors))
}

/// Copies loaded tensors into `params`, checking names and shapes.
pub fn restore_into(params: &mut ParamSet, tensors: Vec<(String, Matrix)>, path: &Path) -> Result<(), ArtifactError> {
    let fmt = |reason: String| ArtifactError::Format { path: path.to_path_buf(), reason };
    if tensors.len() != params.len() {
        return Err(fmt(format!("{} tensors stored, model has {}", tensors.len(), params.len())));
    }
    for (i, (name, m)) in tensors.into_iter().enumerate() {
        if params.names()[i] != name || params.values()[i].shape() != m.shape() {
            return Err(fmt(format!("tensor {i} `{name}` {:?} does not match `{}`", m.shape(), params.names()[i])));
        }
        params.values_mut()[i] = m;
    }
    Ok(())
}

/// Single-matrix artifact (rows in record order).
pub fn save_matrix(stem: &Path, kind: &str, m: &Matrix, meta: serde_json::Value) -> Result<ParamsManifest, ArtifactError> {
    let mut p = ParamSet::new();
    p.add("data", m.clone());
    save_params(stem, kind, &p, meta)
}

pub fn load_matrix(stem: &Path, kind: &str) -> Result<(ParamsManifest, Matrix), ArtifactError> {
    let (manifest, mut tensors) = load_params(stem, kind)?;
    if tensors.len() != 1 {
        let path = stem.with_extension("json");
        return Err(ArtifactError::Format { path, reason: format!("expected one tensor, found {}", tensors.len()) });
    }
    Ok((manifest, tensors.remove(0).1))
}

/// Provenance record written next to every stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input artifact path (relative to the workdir) → sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Rerun tolerance: 0 means byte-identical.
    pub fp_tolerance: f64,
    pub config: serde_json::Value,
    /// Wall-clock time of the run; not part of any hashed output.
    #[serde(default)]
    pub elapsed_secs: f64,
}

impl StageManifest {
    pub fn path(workdir: &Path, stage: &str) -> PathBuf {
        workdir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn load(workdir: &Path, stage: &str) -> Result<Self, ArtifactError> {
        let p = Self::path(workdir, stage);
        let text = read_text(&p).map_err(|e| match e {
            ArtifactError::Missing { path, .. } => ArtifactError::Missing { path, hint: format!("run `{stage}` first") },
            other => other,
        })?;
        from_json(&p, &text)
    }

    pub fn save(&self, workdir: &Path) -> Result<(), ArtifactError> {
        write(&Self::path(workdir, &self.stage), to_json(self).as_bytes())
    }

    /// Re-hashes every recorded output.
    pub fn verify_outputs(&self, workdir: &Path) -> Result<(), ArtifactError> {
        for (rel, expected) in &self.outputs {
            let path = workdir.join(rel);
            let actual = hash_file(&path)?;
            if &actual != expected {
                return Err(ArtifactError::HashMismatch { path, expected: expected.clone(), actual });
            }
        }
        Ok(())
    }
}
