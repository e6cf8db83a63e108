use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{container, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model: Model,
    pub params: Vec<ParamEntry>,
}

/// SHA-256 of the model's canonical JSON.
pub fn config_hash(model: &Model) -> String {
    let json = serde_json::to_vec(model).expect("model serializes");
    hex::encode(Sha256::digest(json))
}

/// Write `manifest.json` and `params.most` into `dir`, tensors in name order.
pub fn save_checkpoint(dir: &Path, model: &Model, params: &ParamStore) -> Result<Manifest> {
    model.check_params(params)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash(model),
        model: model.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let tensors: Vec<_> = params.iter().map(|(_, t)| t).collect();
    container::save_tensors(&dir.join("params.most"), &tensors)?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a checkpoint back. When `expected` is given the stored model must
/// match it exactly.
pub fn load_checkpoint(dir: &Path, expected: Option<&Model>) -> Result<(Manifest, ParamStore)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    if manifest.config_hash != config_hash(&manifest.model) {
        return Err(Error::Format {
            path,
            detail: "config hash does not match the stored model".into(),
        });
    }
    if let Some(model) = expected {
        if model != &manifest.model {
            return Err(Error::Config(format!(
                "checkpoint (format v{CHECKPOINT_VERSION}, config {}) was trained for a different model: {:?} vs {:?}",
                &manifest.config_hash[..12],
                manifest.model,
                model
            )));
        }
    }
    let payload = dir.join("params.most");
    let tensors = container::load_tensors(&payload)?;
    if tensors.len() != manifest.params.len() {
        return Err(Error::Format {
            path: payload,
            detail: format!(
                "{} tensors for {} manifest entries",
                tensors.len(),
                manifest.params.len()
            ),
        });
    }
    let mut params = ParamStore::new();
    for (entry, t) in manifest.params.iter().zip(tensors) {
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: payload,
                detail: format!(
                    "`{}` stored as {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                ),
            });
        }
        params.insert(entry.name.clone(), t);
    }
    manifest.model.check_params(&params)?;
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            input_steps: 4,
            output_steps: 1,
            hidden: 3,
            components: 2,
            layers: 2,
            ..Default::default()
        };
        Model::new(cfg, 2, 2).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = tiny();
        let params = model.init_params(5);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &params).unwrap();
        let (m, loaded) = load_checkpoint(dir.path(), Some(&model)).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(m.config_hash, config_hash(&model));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let model = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &model.init_params(1)).unwrap();
        let other = Model::new(model.config.clone(), 3, 2).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), Some(&other)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let model = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &model.init_params(1)).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }
}
