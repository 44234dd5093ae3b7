//! On-disk model checkpoints and noise artifacts.
//!
//! A checkpoint is a directory holding `config.json`, the schema it names,
//! and one DTSR file per named parameter. A noise artifact is a DTSR file
//! plus a JSON sidecar at the same path with extension `.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{NoiseProvenance, Perturbation, Placement};
use crate::dtsr;
use crate::error::{Error, Result};
use crate::labels::AttributeSchema;
use crate::model::{ModelConfig, ModelParams, ParModel};

pub const CONFIG_FILE: &str = "config.json";
pub const SCHEMA_FILE: &str = "schema.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's JSON serialization.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    /// Schema path relative to the checkpoint directory.
    pub schema: String,
}

fn param_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.dtsr"))
}

pub fn save_model(dir: &Path, model: &ParModel) -> Result<()> {
    create_dir(dir)?;
    write_json(
        &dir.join(CONFIG_FILE),
        &CheckpointConfig {
            model: model.config.clone(),
            schema: SCHEMA_FILE.into(),
        },
    )?;
    model.schema.save(&dir.join(SCHEMA_FILE))?;
    for (name, t) in model.params.named() {
        dtsr::save_tensor(&param_path(dir, &name), t)?;
    }
    Ok(())
}

/// Loads a checkpoint, checking every tensor against the configured shape.
pub fn load_model(dir: &Path) -> Result<ParModel> {
    let cfg: CheckpointConfig = read_json(&dir.join(CONFIG_FILE))?;
    cfg.model.validate()?;
    let schema = AttributeSchema::load(&dir.join(&cfg.schema))?;
    let params = ModelParams::shapes(&cfg.model).try_map(|name, shape| {
        let t = dtsr::load_tensor(&param_path(dir, name))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Mismatch(format!(
                "checkpoint tensor {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    })?;
    ParModel::new(cfg.model, schema, params)
}

/// SHA-256 of the concatenated parameter files in checkpoint order.
pub fn model_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.named() {
        h.update(name.as_bytes());
        h.update(dtsr::encode(t));
    }
    hex::encode(h.finalize())
}

/// Sidecar describing a noise tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSidecar {
    pub placement: Placement,
    pub epsilon: f32,
    pub image_shape: [usize; 3],
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub provenance: Option<NoiseProvenance>,
}

pub fn sidecar_path(noise_path: &Path) -> PathBuf {
    noise_path.with_extension("json")
}

/// Hash identifying a noise tensor and its placement.
pub fn noise_hash(eta: &Perturbation) -> String {
    let mut bytes = dtsr::encode(&eta.noise);
    bytes.extend(serde_json::to_vec(&eta.placement).expect("serializable placement"));
    sha256_hex(&bytes)
}

pub fn save_noise(path: &Path, eta: &Perturbation, provenance: Option<&NoiseProvenance>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dtsr::save_tensor(path, &eta.noise)?;
    let sidecar = NoiseSidecar {
        placement: eta.placement,
        epsilon: eta.epsilon,
        image_shape: eta.image_shape,
        seed: provenance.map(|p| p.seed),
        config_hash: provenance.map(|p| json_hash(&p.config)),
        provenance: provenance.cloned(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn load_noise(path: &Path) -> Result<(Perturbation, NoiseSidecar)> {
    let noise = dtsr::load_tensor(path)?;
    let sidecar: NoiseSidecar = read_json(&sidecar_path(path))?;
    let eta = Perturbation {
        placement: sidecar.placement,
        noise,
        epsilon: sidecar.epsilon,
        image_shape: sidecar.image_shape,
    };
    eta.validate()?;
    Ok((eta, sidecar))
}

/// Fails unless `eta` was made for images of the model's input shape.
pub fn check_noise_fits(eta: &Perturbation, config: &ModelConfig) -> Result<()> {
    if eta.image_shape != config.image_shape() {
        return Err(Error::Mismatch(format!(
            "noise was trained for images {:?}, model expects {:?}",
            eta.image_shape,
            config.image_shape()
        )));
    }
    Ok(())
}
