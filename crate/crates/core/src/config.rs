//! Run configuration: one TOML document covering model shape, training,
//! data, sweeps and output location. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::Precision;
use crate::train::TrainConfig;

/// Model shape without the vocabulary size, which the dataset decides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
    #[serde(default = "defaults::rope_base")]
    pub rope_base: f64,
    #[serde(default = "defaults::norm_epsilon")]
    pub norm_epsilon: f64,
}

mod defaults {
    use std::path::PathBuf;
    pub fn d_model() -> usize {
        128
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        256
    }
    pub fn max_positions() -> usize {
        32
    }
    pub fn rope_base() -> f64 {
        10000.0
    }
    pub fn norm_epsilon() -> f64 {
        1e-5
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs/default")
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            n_layers: defaults::n_layers(),
            d_ff: defaults::d_ff(),
            max_positions: defaults::max_positions(),
            rope_base: defaults::rope_base(),
            norm_epsilon: defaults::norm_epsilon(),
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            rope_base: self.rope_base,
            norm_epsilon: self.norm_epsilon,
        }
    }
}

/// Value lists for hyperparameter sweeps; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub p_ntp: Vec<f64>,
    #[serde(default)]
    pub p_mask: Vec<f64>,
    #[serde(default)]
    pub span: Vec<usize>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.p_ntp.is_empty() && self.p_mask.is_empty() && self.span.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_precision() -> Precision {
    Precision::F32
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: default_precision(),
            output_dir: defaults::output_dir(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

/// Parses `key=value` and stores `value` at the dotted `key` path. The value
/// is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key {key:?} is malformed")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override key {key:?}: {part} is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order, and validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(invalid)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(invalid)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        self.model.model_config(8).validate()?;
        for &p in self.sweep.p_ntp.iter().chain(&self.sweep.p_mask) {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("sweep probability {p} outside [0, 1]")));
            }
        }
        if self.sweep.span.contains(&0) {
            return Err(invalid("sweep span values must be >= 1"));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
