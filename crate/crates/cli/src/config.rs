//! Run configuration: built-in defaults, deep-merged with an optional JSON
//! file, then `--set key.path=value` overrides.

use std::path::Path;

use anyhow::Context;
use foley_core::error::Error;
use foley_core::flowmatch::TrainConfig;
use foley_core::metrics::{EvalFlags, KlDirection, DESYNC_WINDOW_SECONDS};
use foley_core::mmdit::ModelConfig;
use foley_core::sampler::SampleSpec;
use foley_core::synthdata::GenConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Scorer suite seed; the dataset's world seed when absent.
    pub suite_seed: Option<u64>,
    pub kl_direction: KlDirection,
    pub window_seconds: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            suite_seed: None,
            kl_direction: KlDirection::default(),
            window_seconds: DESYNC_WINDOW_SECONDS,
        }
    }
}

impl EvalSettings {
    pub fn flags(&self) -> EvalFlags {
        EvalFlags {
            kl_direction: self.kl_direction,
            window_seconds: self.window_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    pub seed: u64,
    /// Entries probed per model parameter tensor.
    pub probes: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { seed: 0, probes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleSpec,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            sample: SampleSpec::new(0),
            eval: EvalSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Sets `path` (dotted) inside `root`. Every segment but the last must
/// already name an object, and the last must be an existing key.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::config(path, "unknown key"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::config(path, "empty key"))
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "overrides take the form key.path=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Defaults, then the file, then the overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
            if !patch.is_object() {
                return Err(Error::config(path.display().to_string(), "config must be a JSON object").into());
            }
            merge(&mut v, patch);
        }
        for (k, val) in overrides {
            set_path(&mut v, k, val.clone())?;
        }
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.data.world.validate().map_err(|e| match e {
            Error::Config { key, msg } => Error::config(format!("data.{key}"), msg),
            other => other,
        })?;
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if !(self.eval.window_seconds > 0.0 && self.eval.window_seconds.is_finite()) {
            return Err(Error::config("eval.window_seconds", "must be positive"));
        }
        if self.gradcheck.probes == 0 {
            return Err(Error::config("gradcheck.probes", "must be at least 1"));
        }
        Ok(())
    }
}
