//! Experiment configuration as a flat `section.key = value` text file.
//!
//! Values are JSON literals (`0.25`, `true`, `[8.0, 30.0]`, `null`); a value
//! that is not valid JSON is read as a bare string, so `replay.mode = task`
//! works. Keys missing from a file keep their defaults. `#` starts a comment
//! line.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::formats::sha256_hex;
use crate::pipeline::PipelineConfig;
use crate::synth::SyntheticSessionSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data: String,
    pub models: String,
    pub reports: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything one experiment needs. `seed` is the master seed and replaces
/// the generator seed, which is therefore not a key of its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub synth: SyntheticSessionSpec,
    pub spectrogram: SpectrogramConfig,
}

const SHADOWED: &str = "synth.seed";

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticSessionSpec::default_spec();
        Self {
            seed: synth.seed,
            paths: Paths::default(),
            pipeline: PipelineConfig::new(synth.channels),
            synth,
            spectrogram: SpectrogramConfig::default(),
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> bool {
    let mut node = root;
    for part in key.split('.') {
        match node {
            Value::Object(map) => match map.get_mut(part) {
                Some(child) => node = child,
                None => return false,
            },
            _ => return false,
        }
    }
    if node.is_object() {
        return false;
    }
    *node = value;
    true
}

impl ExperimentConfig {
    /// Sorted `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out.retain(|(k, _)| k != SHADOWED);
        out.sort();
        out
    }

    /// Canonical text: one `key = value` line per setting, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses a config file on top of the defaults and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines to this config.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("config line {}: expected key = value", i + 1)))?;
            self.set_in(&mut tree, key.trim(), value.trim())
                .map_err(|e| Error::Argument(format!("config line {}: {e}", i + 1)))?;
        }
        *self = Self::from_tree(tree)?;
        Ok(())
    }

    /// Sets one key, e.g. from a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        self.set_in(&mut tree, key, value)?;
        *self = Self::from_tree(tree)?;
        Ok(())
    }

    fn set_in(&self, tree: &mut Value, key: &str, value: &str) -> Result<()> {
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        if key == SHADOWED || !set_path(tree, key, parsed) {
            return Err(Error::Argument(format!("unknown key {key}")));
        }
        Ok(())
    }

    fn from_tree(mut tree: Value) -> Result<Self> {
        let seed = tree.get("seed").cloned().unwrap_or(Value::Null);
        if let Some(Value::Object(synth)) = tree.get_mut("synth") {
            synth.insert("seed".into(), seed);
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Argument(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.validate()?;
        self.spectrogram.validate(self.pipeline.stream.fs)?;
        if self.synth.channels != self.pipeline.stream.channels || self.synth.fs != self.pipeline.stream.fs {
            return Err(Error::Argument(format!(
                "generator ({} channels at {} Hz) and stream ({} channels at {} Hz) disagree",
                self.synth.channels, self.synth.fs, self.pipeline.stream.channels, self.pipeline.stream.fs
            )));
        }
        if self.synth.seed != self.seed {
            return Err(Error::Argument("generator seed must equal the master seed".into()));
        }
        Ok(())
    }

    /// SHA-256 of [`ExperimentConfig::to_text`].
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// The flat map as a JSON object, for embedding in reports.
    pub fn to_map(&self) -> Map<String, Value> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k, serde_json::from_str(&v).expect("entries are JSON")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recenter::ReferenceKind;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert!(text.contains("replay.mode = \"fixation\"\n"));
        assert!(!text.contains("synth.seed"));
    }

    #[test]
    fn overrides_and_bare_strings() {
        let text = "# comment\nseed = 11\nreplay.mode = task\nstream.band = [7.0, 31.0]\nreplay.task_window = 40\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.synth.seed, 11);
        assert_eq!(cfg.pipeline.replay.mode, ReferenceKind::Task);
        assert_eq!(cfg.pipeline.stream.band, (7.0, 31.0));
        assert_eq!(cfg.pipeline.replay.task_window, Some(40));
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in ["nope = 1", "stream = 1", "synth.seed = 3", "replay.mode = sideways", "stream.hop = \"x\"", "seed 4"] {
            let err = ExperimentConfig::from_text(bad).unwrap_err();
            assert_eq!(err.code(), "argument", "{bad}: {err}");
        }
        let err = ExperimentConfig::from_text("stream.channels = 8").unwrap_err();
        assert!(err.to_string().contains("disagree"));
    }

    #[test]
    fn set_applies_one_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("fixation.beta_run", "0.5").unwrap();
        assert_eq!(cfg.pipeline.fixation.beta_run, 0.5);
        assert!(cfg.set("fixation.beta_run", "-1").is_err());
    }
}
