//! Run configuration: one TOML file with namespaced keys
//! (`schedule.*`, `denoiser.*`, `train.*`, `data.*`).
//!
//! Keys may be written as tables or dotted keys. Overrides are
//! `key=value` strings whose value is parsed as a TOML value, falling back
//! to a bare string. Unknown keys are errors; missing keys take defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datasets::ToySpec;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::model::BackboneKind;
use crate::schedule::ScheduleSpec;
use crate::textspace::hex_digest;
use crate::train::TrainConfig;
use crate::vision::TOY_WIDTHS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub toy: ToySpec,
    pub backbone: BackboneKind,
    /// Weights archive for the imported backbone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            toy: ToySpec::default(),
            backbone: BackboneKind::Toy,
            backbone_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Defaults sized for the toy dataset: `32 x 32` images through the toy
/// backbone give `16` tokens of `64` channels.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig {
                image_tokens: 16,
                image_channels: TOY_WIDTHS[2],
                ..DenoiserConfig::default()
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Table> {
    let mut root = Table::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            node = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("key `{key}` nests under a scalar"))),
            };
        }
        node.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    Ok(root)
}

/// Parse `key=value`; the value is TOML when it parses as such.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let key = key.trim().to_string();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!(
            "override `{text}` has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

impl RunConfig {
    /// Parse TOML text, apply overrides, and validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        // Start from the defaults so partially specified sections work.
        let mut base = BTreeMap::new();
        let defaults = Table::try_from(RunConfig::default()).expect("defaults serialize");
        flatten("", &defaults, &mut base);
        let overrides = overrides
            .iter()
            .map(|o| parse_override(o))
            .collect::<Result<Vec<_>>>()?;
        for (k, v) in flat.into_iter().chain(overrides) {
            let v = match (base.get(&k), v) {
                (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
                (Some(_), v) => v,
                (None, v) if k == "data.backbone_weights" => v,
                (None, _) => return Err(Error::Config(format!("unknown key `{k}`"))),
            };
            base.insert(k, v);
        }
        let cfg: RunConfig = unflatten(&base)?
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.data.backbone == BackboneKind::Toy {
            let side = self.data.toy.image_size / 8;
            if self.denoiser.image_channels != TOY_WIDTHS[2]
                || self.denoiser.image_tokens != side * side
            {
                return Err(Error::Config(format!(
                    "toy backbone on {0}x{0} images yields {1} tokens of {2} channels; \
                     denoiser expects {3} x {4}",
                    self.data.toy.image_size,
                    side * side,
                    TOY_WIDTHS[2],
                    self.denoiser.image_tokens,
                    self.denoiser.image_channels
                )));
            }
        } else if self.train.finetune_backbone {
            return Err(Error::Config(
                "finetune_backbone is only supported for the toy backbone".into(),
            ));
        }
        Ok(())
    }

    /// Canonical TOML snapshot with every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of [`RunConfig::to_toml`].
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Every key with its current value, in sorted order.
    pub fn flat_keys(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(
            "",
            &Table::try_from(self).expect("run config serializes"),
            &mut out,
        );
        out
    }
}
