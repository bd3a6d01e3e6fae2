use std::fs;
use std::path::{Path, PathBuf};

use dvsm::model::ModelConfig;
use dvsm::scenes::DatasetConfig;
use dvsm::train::{substream, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root directory.
    pub path: String,
    pub n_scenes: usize,
    pub frames_per_scene: usize,
    pub resolutions: Vec<usize>,
    #[serde(default = "default_fov")]
    pub fov_y_deg: f64,
}

fn default_fov() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub context_k: usize,
    /// Only `"test"` is evaluated; targets are always held out.
    #[serde(default = "default_split")]
    pub split: String,
    /// Evaluation resolution; defaults to the last curriculum phase.
    #[serde(default)]
    pub resolution: Option<usize>,
}

fn default_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub seed: u64,
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(64, 4, 4, 4, 4),
            train: TrainConfig::default(),
            data: DataSection {
                path: "data".into(),
                n_scenes: 8,
                frames_per_scene: 64,
                resolutions: vec![32, 48],
                fov_y_deg: default_fov(),
            },
            eval: EvalSection {
                context_k: 8,
                split: default_split(),
                resolution: None,
            },
            seed: 0,
            output: "runs/default".into(),
        }
    }
}

impl RunConfig {
    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self, CliError> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{set}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj
                    .get_mut(*part)
                    .ok_or_else(|| CliError::Usage(format!("override `{key}`: unknown section `{part}`")))?;
            }
        }
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
    }

    /// The training seed is the `sampler`/`init` root; the dataset seed is
    /// the `data` substream of the run seed.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn data_seed(&self) -> u64 {
        substream(self.seed, "data", 0)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut c = DatasetConfig::new(self.data.n_scenes, self.data.frames_per_scene, &self.data.resolutions, self.data_seed());
        c.fov_y_deg = self.data.fov_y_deg;
        c
    }

    pub fn eval_resolution(&self) -> usize {
        self.eval
            .resolution
            .or_else(|| self.train.curriculum.last().map(|p| p.resolution))
            .unwrap_or_else(|| self.data.resolutions.iter().copied().max().unwrap_or(0))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output)
    }

    /// Writes the provenance file into `dir`.
    pub fn write_resolved(&self, dir: &Path, threads: usize) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let mut tree = serde_json::to_value(self).expect("config serializes");
        tree["provenance"] = serde_json::json!({
            "threads": threads,
            "model_hash": format!("{:016x}", self.model.hash()),
        });
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(&tree).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let c = RunConfig::default().with_overrides(&["model.D=32".into(), "train.lambda=0".into()]).unwrap();
        let text = c.canonical_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), text);
    }

    #[test]
    fn override_touches_only_its_field() {
        let base = RunConfig::default();
        let c = base.clone().with_overrides(&["model.D=128".into()]).unwrap();
        assert_eq!(c.model.dim, 128);
        let mut expect = base;
        expect.model.dim = 128;
        assert_eq!(c, expect);
        let s = RunConfig::default().with_overrides(&["output=runs/x".into()]).unwrap();
        assert_eq!(s.output, "runs/x");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::default().with_overrides(&["model.depth=3".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["nope.D=3".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.D".into()]).is_err());
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        tree["extra"] = 1.into();
        assert!(RunConfig::from_json(&tree.to_string()).is_err());
    }
}
