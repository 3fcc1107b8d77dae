//! Layered configuration: defaults < file (TOML or JSON) < `--key=value` flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("override `{0}` is not of the form --key=value")]
    Malformed(String),
    #[error("`{0}` is not a table and cannot hold nested keys")]
    NotATable(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Recursively overlay `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_file(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.display().to_string(),
        message,
    };
    if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        match Value::try_from(json).map_err(|e| parse_err(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => Err(parse_err("top level must be an object".into())),
        }
    } else {
        text.parse::<Table>().map_err(|e| parse_err(e.to_string()))
    }
}

/// Values are read as TOML literals (`3`, `1e-3`, `true`, `[1, 2]`);
/// anything else is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| ConfigError::Malformed(arg.to_string()))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| ConfigError::Malformed(arg.to_string()))?;
    let path: Vec<String> = key.split('.').map(|p| p.replace('-', "_")).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Malformed(arg.to_string()));
    }
    Ok((path, parse_value(raw)))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::NotATable(p.clone())),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Build a config from `defaults`, an optional file and flag overrides.
/// Unknown keys are rejected by the target type.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T, ConfigError> {
    let mut table = match Value::try_from(defaults).map_err(|e| ConfigError::Invalid(e.to_string()))? {
        Value::Table(t) => t,
        _ => return Err(ConfigError::Invalid("defaults must be a table".into())),
    };
    if let Some(path) = file {
        merge(&mut table, read_file(path)?);
    }
    for arg in overrides {
        let (path, value) = parse_override(arg)?;
        set_path(&mut table, &path, value)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))
}
