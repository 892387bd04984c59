use super::{Aggregator, AggregatorConfig};
use crate::artifact::{self, load_matrix, load_params, restore_into, save_matrix, save_params, ArtifactError};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KIND: &str = "aggregator";
const SIG_KIND: &str = "signatures";

/// Model metadata plus fine-tuning provenance when applicable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: AggregatorConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub programs: Vec<String>,
}

/// Saves weights; returns the payload hash, which serves as the model hash.
pub fn save_model(stem: &Path, agg: &Aggregator, meta: &ModelMeta) -> Result<String, ArtifactError> {
    let m = save_params(stem, KIND, &agg.params, serde_json::to_value(meta).expect("serializable"))?;
    Ok(m.payload_sha256)
}

pub fn load_model(stem: &Path) -> Result<(Aggregator, ModelMeta, String), ArtifactError> {
    let (manifest, tensors) = load_params(stem, KIND)?;
    let path = stem.with_extension("json");
    let meta: ModelMeta =
        serde_json::from_value(manifest.meta).map_err(|e| ArtifactError::Format { path: path.clone(), reason: e.to_string() })?;
    let mut agg = Aggregator::new(meta.config.clone(), 0).map_err(|e| ArtifactError::Format { path: path.clone(), reason: e.to_string() })?;
    restore_into(&mut agg.params, tensors, &path)?;
    Ok((agg, meta, manifest.payload_sha256))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureIndexEntry {
    pub program_id: String,
    pub interval_index: usize,
    pub cpi_true: Option<f64>,
    /// Instructions in the interval.
    pub instrs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureSet {
    pub model_sha256: String,
    pub index: Vec<SignatureIndexEntry>,
    /// One row per index entry.
    pub matrix: Matrix,
}

#[derive(Serialize, Deserialize)]
struct SigMeta {
    model_sha256: String,
    width: usize,
    count: usize,
}

impl SignatureSet {
    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Writes `<stem>.json`, `<stem>.bin` and `<stem>.index.jsonl`.
pub fn save_signatures(stem: &Path, sigs: &SignatureSet) -> Result<(), ArtifactError> {
    let meta = SigMeta { model_sha256: sigs.model_sha256.clone(), width: sigs.matrix.cols, count: sigs.index.len() };
    save_matrix(stem, SIG_KIND, &sigs.matrix, serde_json::to_value(meta).expect("serializable"))?;
    let lines: String = sigs.index.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect();
    artifact::write(&index_path(stem), lines.as_bytes())
}

fn index_path(stem: &Path) -> std::path::PathBuf {
    stem.with_extension("index.jsonl")
}

pub fn load_signatures(stem: &Path) -> Result<SignatureSet, ArtifactError> {
    let (manifest, matrix) = load_matrix(stem, SIG_KIND)?;
    let mpath = stem.with_extension("json");
    let meta: SigMeta =
        serde_json::from_value(manifest.meta).map_err(|e| ArtifactError::Format { path: mpath.clone(), reason: e.to_string() })?;
    let ipath = index_path(stem);
    let text = artifact::read_text(&ipath)?;
    let index = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| artifact::from_json(&ipath, l))
        .collect::<Result<Vec<SignatureIndexEntry>, _>>()?;
    if index.len() != meta.count || matrix.rows != meta.count || matrix.cols != meta.width {
        return Err(ArtifactError::Format { path: ipath, reason: format!("index has {} rows, matrix {}×{}", index.len(), matrix.rows, matrix.cols) });
    }
    Ok(SignatureSet { model_sha256: meta.model_sha256, index, matrix })
}
