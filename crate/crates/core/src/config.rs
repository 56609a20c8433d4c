//! Experiment configuration: one JSON document drives the whole
//! pipeline. Every section has defaults, unknown keys are rejected at
//! any depth, and values can be overridden from the command line with
//! dot-path assignments like `tta.gamma=0.03125`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::bench::{Corruption, CorruptionKind, SceneSpec};
use crate::detector::ModelConfig;
use crate::engine::TtaConfig;
use crate::pretrain::PretrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
}

/// What the adaptation commands stream over: how many scenes, and which
/// corruptions to run. Severity 0 is allowed here and means a clean
/// (identity) stream, useful as a no-shift control.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub scenes: usize,
    pub corruptions: Vec<Corruption>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            scenes: 800,
            corruptions: vec![Corruption { kind: CorruptionKind::GaussianNoise, severity: 5 }],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU threshold for counting a detection as correct.
    pub iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; all randomness derives from it through named
    /// sub-streams.
    pub seed: u64,
    pub output_dir: String,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub augment: AugmentConfig,
    pub tta: TtaConfig,
    pub stream: StreamSpec,
    pub eval: EvalConfig,
    /// Seeds for the multi-seed ablation command.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out".into(),
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            augment: AugmentConfig::default(),
            tta: TtaConfig::default(),
            stream: StreamSpec::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    /// Full-depth validation; error messages name the offending section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.scene.validate().map_err(|e| ConfigError::Invalid(format!("scene: {e}")))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.pretrain.validate().map_err(|e| ConfigError::Invalid(format!("pretrain: {e}")))?;
        self.augment.validate().map_err(|e| ConfigError::Invalid(format!("augment: {e}")))?;
        self.tta.validate().map_err(|e| ConfigError::Invalid(format!("tta: {e}")))?;
        if self.stream.scenes == 0 {
            return inv("stream.scenes must be positive".into());
        }
        for (i, c) in self.stream.corruptions.iter().enumerate() {
            if c.severity != 0 {
                c.validate()
                    .map_err(|e| ConfigError::Invalid(format!("stream.corruptions[{i}]: {e}")))?;
            }
        }
        if !(self.eval.iou > 0.0 && self.eval.iou < 1.0) {
            return inv(format!("eval.iou must lie in (0, 1), got {}", self.eval.iou));
        }
        if self.seeds.is_empty() {
            return inv("seeds must be nonempty".into());
        }
        if (self.model.img_h, self.model.img_w) != (self.scene.img_h, self.scene.img_w) {
            return inv(format!(
                "model expects {}x{} scenes but the scene section produces {}x{}",
                self.model.img_h, self.model.img_w, self.scene.img_h, self.scene.img_w
            ));
        }
        if self.model.c_in != self.scene.channels {
            return inv(format!(
                "model.c_in = {} but scene.channels = {}",
                self.model.c_in, self.scene.channels
            ));
        }
        if self.model.classes != self.scene.classes {
            return inv(format!(
                "model.classes = {} but scene.classes = {}",
                self.model.classes, self.scene.classes
            ));
        }
        Ok(())
    }
}

/// Deserialize a config from a JSON value; errors carry the key path.
pub fn config_from_value(value: serde_json::Value) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| ConfigError::Invalid(format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ConfigError::Invalid(format!("malformed json: {e}")))?;
    config_from_value(value)
}

/// Load a config file and apply `key.path=value` overrides before
/// deserializing, so overrides face the same validation as the file.
pub fn load_config(path: &Path, sets: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Invalid(format!("malformed json: {e}")))?;
    apply_overrides(&mut value, sets)?;
    config_from_value(value)
}

/// Apply one `key.path=value` assignment per entry onto a JSON tree.
/// Path segments address object keys, or array elements when numeric.
/// Values parse as JSON first (numbers, booleans, quoted strings, even
/// arrays) and fall back to plain strings.
pub fn apply_overrides(root: &mut serde_json::Value, sets: &[String]) -> Result<(), ConfigError> {
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override {s:?} is not key.path=value")))?;
        let path = path.trim();
        let segments: Vec<&str> = path.split('.').collect();
        if path.is_empty() || segments.iter().any(|seg| seg.is_empty()) {
            return Err(ConfigError::Invalid(format!("override {s:?} has an empty key path")));
        }
        let raw = raw.trim();
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));

        let mut cur = &mut *root;
        for seg in &segments[..segments.len() - 1] {
            cur = match (cur.is_array(), seg.parse::<usize>()) {
                (true, Ok(idx)) => cur.get_mut(idx).ok_or_else(|| {
                    ConfigError::Invalid(format!("override {s:?}: index {idx} out of bounds"))
                })?,
                _ => cur
                    .as_object_mut()
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "override {s:?}: `{seg}` does not address an object"
                        ))
                    })?
                    .entry(seg.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default())),
            };
        }
        let last = segments[segments.len() - 1];
        match (cur.is_array(), last.parse::<usize>()) {
            (true, Ok(idx)) => {
                let slot = cur.get_mut(idx).ok_or_else(|| {
                    ConfigError::Invalid(format!("override {s:?}: index {idx} out of bounds"))
                })?;
                *slot = value;
            }
            _ => {
                cur.as_object_mut()
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "override {s:?}: `{last}` does not address an object"
                        ))
                    })?
                    .insert(last.to_string(), value);
            }
        }
    }
    Ok(())
}
