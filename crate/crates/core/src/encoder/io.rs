use super::{Encoder, EncoderConfig, EncoderError};
use crate::artifact::{load_params, restore_into, save_params, ArtifactError};
use crate::asmnorm::DIMS;
use serde::{Deserialize, Serialize};
use std::path::Path;

const KIND: &str = "encoder";

/// Metadata stored alongside encoder weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub config: EncoderConfig,
    pub vocab_sizes: [usize; DIMS],
    pub vocab_sha256: String,
    pub seed: u64,
}

pub fn save_weights(stem: &Path, encoder: &Encoder, vocab_sha256: &str, seed: u64) -> Result<(), ArtifactError> {
    let meta = WeightsManifest {
        config: encoder.config.clone(),
        vocab_sizes: encoder.vocab_sizes,
        vocab_sha256: vocab_sha256.to_string(),
        seed,
    };
    save_params(stem, KIND, &encoder.params, serde_json::to_value(meta).expect("serializable"))?;
    Ok(())
}

pub fn load_weights(stem: &Path) -> Result<(Encoder, WeightsManifest), ArtifactError> {
    let (manifest, tensors) = load_params(stem, KIND)?;
    let path = stem.with_extension("json");
    let meta: WeightsManifest = serde_json::from_value(manifest.meta)
        .map_err(|e| ArtifactError::Format { path: path.clone(), reason: e.to_string() })?;
    let mut enc = Encoder::new(meta.config.clone(), meta.vocab_sizes, 0)
        .map_err(|e: EncoderError| ArtifactError::Format { path: path.clone(), reason: e.to_string() })?;
    restore_into(&mut enc.params, tensors, &path)?;
    Ok((enc, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_gives_identical_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("enc");
        let e = Encoder::new(EncoderConfig::tiny(), [9, 4, 5, 4, 5, 4], 5).unwrap();
        save_weights(&stem, &e, "abc", 5).unwrap();
        let (back, meta) = load_weights(&stem).unwrap();
        assert_eq!(meta.vocab_sha256, "abc");
        let toks = vec![[3, 1, 2, 1, 1, 1], [4, 2, 1, 3, 2, 1]];
        assert_eq!(e.encode(&toks).unwrap(), back.encode(&toks).unwrap());
    }
}
