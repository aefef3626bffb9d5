//! Run configuration and provenance hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{ablation_configure, DEFAULT_SCHEDULE};
use crate::model::ModelConfig;
use crate::mpm::{MpmConfig, SceneConfig};
use crate::training::TrainConfig;
use crate::trajectory::{hex, read_file};

/// SHA-256 of the compact JSON serialization of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    hex(&Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub n_objects: usize,
    pub points_per_object: usize,
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_objects: 2,
            points_per_object: 500,
            n_frames: 60,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub schedule: Vec<usize>,
    pub workers: usize,
    /// Rollout length of the equivariance check.
    pub equivariance_steps: usize,
    /// Frame the equivariance check starts from. Frame 0 of a drop from rest
    /// has zero velocity everywhere, which leaves control headings undefined.
    pub equivariance_frame: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            workers: 1,
            equivariance_steps: 5,
            equivariance_frame: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Share of the training split used for finetuning.
    pub fraction: f64,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            epochs: 300,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root holding one directory per split.
    pub data: Option<PathBuf>,
    /// Where checkpoints and reports go.
    pub output: Option<PathBuf>,
}

/// Every knob of a run, loaded from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mpm: MpmConfig,
    pub scene: SceneConfig,
    pub datagen: DatagenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::validation(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let bytes = read_file(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::validation(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.mpm.validate()?;
        self.train.validate()?;
        self.effective_model()?.validate()?;
        if self.datagen.n_objects == 0 || self.datagen.points_per_object == 0 || self.datagen.n_frames == 0 {
            return Err(Error::validation("datagen counts must be positive"));
        }
        Ok(())
    }

    /// The model config with the training ablation switches applied.
    pub fn effective_model(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if self.train.non_equivariant_attr {
            m = ablation_configure(&m, Some("non_equivariant_attr"))?;
        }
        if self.train.static_adjacency {
            m = ablation_configure(&m, Some("static_adjacency"))?;
        }
        Ok(m)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Apply `a.b.c=value`; `value` is parsed as JSON and taken as a string
/// otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override `{assignment}` is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::validation(format!("override `{path}`: `{key}` is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), new);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::validation("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = RunConfig::from_json("{}", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.schedule, vec![1, 5, 10, 15, 20, 25]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"epochz": 3}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_json(
            "{}",
            &[
                "train.epochs=7".into(),
                "model.variant=se2".into(),
                "datagen.seed=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.variant, crate::latent::GroupVariant::Se2);
        assert_eq!(cfg.datagen.seed, 3);
        assert!(RunConfig::from_json("{}", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn ablation_flags_reach_model() {
        let cfg = RunConfig::from_json(r#"{"train": {"static_adjacency": true}}"#, &[]).unwrap();
        assert_eq!(
            cfg.effective_model().unwrap().adjacency,
            crate::processor::Adjacency::Static
        );
    }
}
