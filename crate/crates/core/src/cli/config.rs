//! TOML run configuration: `[data]`, `[model]` and `[train]` sections, all
//! optional, unknown keys rejected. `[model]` may name a `preset` whose
//! fields the remaining keys override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::GenConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    data: Option<GenConfig>,
    #[serde(default)]
    model: Option<toml::Table>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn bad(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(bad)?;
        let model = match raw.model {
            None => ModelConfig::default(),
            Some(mut table) => {
                let preset = match table.remove("preset") {
                    None => ModelConfig::desk(),
                    Some(toml::Value::String(name)) => ModelConfig::preset(&name)?,
                    Some(other) => return Err(Error::Config(format!("model.preset must be a string, got {other}"))),
                };
                let mut base = toml::Table::try_from(&preset).map_err(bad)?;
                for (k, v) in table {
                    if !base.contains_key(&k) {
                        return Err(Error::Config(format!("unknown model key {k:?}")));
                    }
                    base.insert(k, v);
                }
                toml::Value::Table(base).try_into().map_err(bad)?
            }
        };
        let config = Self {
            data: raw.data.unwrap_or_default(),
            model,
            train: raw.train.unwrap_or_default(),
        };
        config.data.validate()?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
