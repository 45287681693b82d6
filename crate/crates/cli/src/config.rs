//! Run configuration: a TOML key-value file, then `--set key=value`
//! overrides, then dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polar_core::model::ModelConfig;
use polar_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory receiving checkpoints, logs and the vocabulary.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint whose weights seed the model (typically from `psp-pretrain`).
    pub init: Option<PathBuf>,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.train, &self.dev, &self.test, &self.init].into_iter().flatten() {
            if !p.exists() {
                bail!("path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn require_train(&self) -> Result<&Path> {
        self.train.as_deref().context("no training corpus given (set `train` or pass --train)")
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out_dir.as_deref().context("no output directory given (set `out_dir` or pass --out)")
    }
}

pub fn read_table(path: Option<&Path>) -> Result<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in `{key}`"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("`{p}` in `{key}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_overrides(table: &mut Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s.split_once('=').with_context(|| format!("override `{s}` is not key=value"))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn finish<T: DeserializeOwned>(table: Table) -> Result<T> {
    Value::Table(table).try_into().context("invalid configuration")
}
