//! TOML run configuration.
//!
//! ```toml
//! schema_version = 1
//!
//! [model]
//! preset = "desk"            # or "paper"; or spell out every ModelConfig field
//! variant = "DBFEM+CAFFM"
//!
//! [train]
//! batch_size = 8
//! epochs = 100
//! ```
//!
//! Unknown keys anywhere are errors. The resolved form written next to every
//! run's outputs spells out the full model and training configuration and
//! parses back to the same values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Scale, Variant};
use crate::train::{Suite, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preset {
    preset: Scale,
    #[serde(default)]
    variant: Option<Variant>,
    #[serde(default)]
    resnet_depth: Option<usize>,
}

fn model_from_table(table: toml::Table) -> Result<ModelConfig> {
    let config = if table.contains_key("preset") {
        let p: Preset = table.try_into().map_err(|e| Error::Config(format!("model: {e}")))?;
        let mut cfg = match p.preset {
            Scale::Desk => ModelConfig::desk(),
            Scale::Paper => ModelConfig::paper(),
        };
        if let Some(v) = p.variant {
            cfg = cfg.with_variant(v);
        }
        if let Some(d) = p.resnet_depth {
            cfg.resnet_depth = d;
        }
        cfg
    } else {
        table.try_into().map_err(|e| Error::Config(format!("model: {e}")))?
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    schema_version: u32,
    /// Informational; written by `config.resolved`.
    #[serde(default)]
    #[allow(dead_code)]
    command: Option<String>,
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default)]
    suite: Option<Suite>,
    #[serde(default)]
    samples: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    model: Option<toml::Table>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    synth: Option<SynthConfig>,
}

/// A parsed run configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Default manifest path.
    pub data: Option<PathBuf>,
    pub suite: Option<Suite>,
    /// Default sample count for `synth`.
    pub samples: Option<usize>,
    /// Default seed for `synth`.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            suite: None,
            samples: None,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                raw.schema_version
            )));
        }
        raw.train.validate()?;
        Ok(RunConfig {
            model: match raw.model {
                Some(t) => model_from_table(t)?,
                None => ModelConfig::desk(),
            },
            train: raw.train,
            synth: raw.synth.unwrap_or_default(),
            data: raw.data,
            suite: raw.suite,
            samples: raw.samples,
            seed: raw.seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Everything a command ran with, as written to `config.resolved`.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved<'a> {
    pub schema_version: u32,
    pub command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<Suite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<&'a ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<&'a SynthConfig>,
}

impl<'a> Resolved<'a> {
    pub fn new(command: &'a str) -> Self {
        Resolved {
            schema_version: SCHEMA_VERSION,
            command,
            data: None,
            suite: None,
            samples: None,
            seed: None,
            model: None,
            train: None,
            synth: None,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_and_overrides() {
        let cfg = RunConfig::parse(
            "schema_version = 1\n[model]\npreset = \"desk\"\nvariant = \"GFEM\"\n[train]\nbatch_size = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelConfig::desk().with_variant(Variant::Gfem));
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.epochs, 500);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = RunConfig::parse("schema_version = 1\n[train]\nbatchsize = 8\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
        let err = RunConfig::parse("schema_version = 1\n[model]\npreset = \"desk\"\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(RunConfig::parse("[train]\nepochs = 1\n").is_err());
        assert!(RunConfig::parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let model = ModelConfig::desk();
        let train = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut r = Resolved::new("train");
        r.data = Some("data/manifest.jsonl".into());
        r.model = Some(&model);
        r.train = Some(&train);
        let back = RunConfig::parse(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.train, train);
        assert_eq!(back.data, Some(PathBuf::from("data/manifest.jsonl")));
    }
}
