//! The global configuration document and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use talkhead_core::config::ModelConfig;
use talkhead_core::data::{CorpusSpec, Split};
use talkhead_core::training::TrainConfig;
use talkhead_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory written by `synth-data`.
    pub data_dir: PathBuf,
    /// Corpus manifest; defaults to `<data_dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Mesh topology; defaults to the one named in the manifest.
    pub topology: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            manifest: None,
            topology: None,
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir.join("manifest.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    /// Evaluate at most this many sequences of the split.
    pub max_sequences: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub paths: Paths,
    pub data: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Write an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl GlobalConfig {
    /// Defaults, overlaid with the file at `path`, overlaid with `key=value`
    /// overrides addressed by dotted paths.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.to_path_buf()));
                }
                std::fs::read_to_string(p)?
                    .parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses the right-hand side as a TOML value, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = parts.split_last().expect("non-empty split");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_and_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nbatch_size = 4\nlearning_rate = 0.001\n").unwrap();
        let cfg = GlobalConfig::resolve(Some(&path), &["train.batch_size=6".into()]).unwrap();
        assert_eq!(cfg.train.batch_size, 6);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.window, TrainConfig::default().window);
    }

    #[test]
    fn nested_and_string_overrides() {
        let cfg = GlobalConfig::resolve(
            None,
            &[
                "train.losses.temperature=0.5".into(),
                "eval.split=val".into(),
                "paths.output_dir=out/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.losses.temperature, 0.5);
        assert_eq!(cfg.eval.split, Split::Val);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for bad in ["train.nope=1", "train.batch_size=0", "model.style_dim=0", "novalue"] {
            match GlobalConfig::resolve(None, &[bad.into()]) {
                Err(Error::Config(msg)) => assert!(!msg.is_empty()),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = GlobalConfig::default();
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        assert_eq!(GlobalConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }
}
