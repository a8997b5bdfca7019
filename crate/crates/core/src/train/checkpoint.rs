//! Checkpoint directory: `manifest.json` plus `params.bin`, the parameters as
//! little-endian binary32 values concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::preprocess::FreqTable;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything besides the weights needed to reuse a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub train_config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub disease_names: Vec<String>,
    /// Sentence frequencies of the training split, for preprocessing new records.
    pub freq_table: Option<FreqTable>,
    /// Corpus the model was trained from, when known.
    pub corpus: Option<String>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub metadata: TrainingMetadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            model: self.params.config.clone(),
            tensors: self
                .params
                .store
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&checkpoint.manifest())?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let mut blob = Vec::with_capacity(checkpoint.params.store.element_count() * 4);
    for (_, t) in checkpoint.params.store.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{MANIFEST_FILE} is not valid JSON: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| {
            Error::CorruptCheckpoint(format!("{MANIFEST_FILE} has no format_version"))
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw)
        .map_err(|e| Error::CorruptCheckpoint(format!("{MANIFEST_FILE}: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum::<usize>()
        * 4;
    if blob.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "{PARAMS_FILE} holds {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut values = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for entry in &manifest.tensors {
        let n = entry.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        store.push(entry.name.clone(), tensor);
    }
    let params = ModelParams::from_store(&manifest.model, store).map_err(|e| {
        Error::CorruptCheckpoint(format!("manifest does not match its model config: {e}"))
    })?;
    Ok(Checkpoint {
        params,
        metadata: manifest.metadata,
    })
}

/// Layout check without loading weights.
pub fn check_compatible(manifest: &Manifest, config: &ModelConfig) -> Result<()> {
    if &manifest.model != config {
        return Err(Error::config(
            "checkpoint model config differs from the requested one",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationVariant;

    fn checkpoint() -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["lens", "opacity"]);
        let cfg = ModelConfig {
            d_model: 8,
            word_layers: 1,
            n_heads: 2,
            n_labels: 2,
            vocab_size: vocab.len(),
            ..Default::default()
        };
        Checkpoint {
            params: ModelParams::init(&cfg, 5).unwrap(),
            metadata: TrainingMetadata {
                train_config: TrainConfig {
                    model: cfg,
                    ..Default::default()
                },
                vocabulary: vocab,
                disease_names: vec!["a".into(), "b".into()],
                freq_table: None,
                corpus: None,
                best_epoch: Some(0),
                epochs_run: 1,
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for ((_, a), (_, b)) in ck.params.store.iter().zip(back.params.store.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, ck);
        let len = fs::metadata(dir.path().join(PARAMS_FILE)).unwrap().len() as usize;
        assert_eq!(len, ck.params.store.element_count() * 4);
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&checkpoint(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m["format_version"] = 99.into();
        fs::write(&path, m.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Version {
                found: 99,
                expected: FORMAT_VERSION
            })
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&checkpoint(), dir.path()).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&path, blob).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn mismatched_layout_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint();
        save_checkpoint(&ck, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.model.variant = AblationVariant::WoL;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::CorruptCheckpoint(_))
        ));
        let other = ModelConfig {
            n_labels: 3,
            ..ck.params.config.clone()
        };
        assert!(matches!(
            check_compatible(&ck.manifest(), &other),
            Err(Error::Config(_))
        ));
    }
}
