//! Checkpoint directories: one little-endian `f32` file per parameter, the
//! optimizer moments alongside, and a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Adam;
use crate::trajectory::{f32s, read_file, write_file};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Highest completed training stage (0 for an untrained model).
    pub stage: u8,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// Hash of the training configuration that produced this state.
    pub train_config_hash: String,
    pub optimizer_steps: u64,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub stage: u8,
    pub epoch: usize,
    pub train_config_hash: String,
}

impl TrainState {
    pub fn fresh(model: Model) -> Self {
        let optimizer = Adam::new(&model.store);
        Self {
            model,
            optimizer,
            stage: 0,
            epoch: 0,
            train_config_hash: String::new(),
        }
    }
}

fn mat_bytes(m: &Mat) -> Vec<u8> {
    m.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn file_name(name: &str) -> String {
    format!("{name}.f32")
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let store = &state.model.store;
    for sub in ["params", "adam_m", "adam_v"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut params = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let value = store.value(id);
        let file = file_name(name);
        write_file(&dir.join("params").join(&file), &mat_bytes(value))?;
        write_file(
            &dir.join("adam_m").join(&file),
            &mat_bytes(&state.optimizer.m[id.index()]),
        )?;
        write_file(
            &dir.join("adam_v").join(&file),
            &mat_bytes(&state.optimizer.v[id.index()]),
        )?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            file,
            trainable: store.is_trainable(id),
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: state.model.config.hash(),
        model: state.model.config.clone(),
        stage: state.stage,
        epoch: state.epoch,
        train_config_hash: state.train_config_hash.clone(),
        optimizer_steps: state.optimizer.t,
        params,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "format_version",
            format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                m.format_version
            ),
        ));
    }
    let hash = m.model.hash();
    if hash != m.config_hash {
        return Err(Error::format(
            "config_hash",
            format!(
                "manifest records {} but the embedded model config hashes to {hash}",
                m.config_hash
            ),
        ));
    }
    Ok(m)
}

fn read_mat(path: &Path, shape: [usize; 2]) -> Result<Mat> {
    let bytes = read_file(path)?;
    if bytes.len() != shape[0] * shape[1] * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {} bytes, found {}", shape[0] * shape[1] * 4, bytes.len()),
        ));
    }
    Ok(Mat::from_shape_vec((shape[0], shape[1]), f32s(&bytes)).expect("size checked"))
}

/// Load a checkpoint, rebuilding the model from the embedded config.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(&manifest.model)?;
    let mut optimizer = Adam::new(&model.store);
    if manifest.params.len() != model.store.len() {
        return Err(Error::format(
            "params",
            format!(
                "checkpoint has {} arrays, model expects {}",
                manifest.params.len(),
                model.store.len()
            ),
        ));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::format("params", format!("unknown parameter {}", entry.name)))?;
        if model.store.value(id).dim() != (entry.shape[0], entry.shape[1]) {
            return Err(Error::format("params", format!("shape mismatch for {}", entry.name)));
        }
        let value = read_mat(&dir.join("params").join(&entry.file), entry.shape)?;
        model.store.set(id, value)?;
        optimizer.m[id.index()] = read_mat(&dir.join("adam_m").join(&entry.file), entry.shape)?;
        optimizer.v[id.index()] = read_mat(&dir.join("adam_v").join(&entry.file), entry.shape)?;
    }
    optimizer.t = manifest.optimizer_steps;
    Ok(TrainState {
        model,
        optimizer,
        stage: manifest.stage,
        epoch: manifest.epoch,
        train_config_hash: manifest.train_config_hash,
    })
}

/// Load a checkpoint and require its model config to hash to `expected`.
pub fn load_checkpoint_matching(dir: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let want = expected.hash();
    if manifest.config_hash != want {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match the run config hash {want}",
            manifest.config_hash
        )));
    }
    load_checkpoint(dir)
}
