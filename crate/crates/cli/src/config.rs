//! Config files plus `--set key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

/// Parses `key=value`. The value is read as JSON when it parses, otherwise
/// taken as a bare string, so `scheme=concat` and `lr=0.01` both work.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {raw:?} is not key=value")))?;
    if key.is_empty() {
        return Err(CliError::Usage(format!("override {raw:?} has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Replaces the value at a dotted path. Only existing keys can be set;
/// numeric segments index arrays.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    for seg in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    *cur = value;
    Ok(())
}

/// Reads `path` (or starts from `T::default()`), applies the overrides and
/// re-validates through serde so that unknown keys and bad types fail.
pub fn load<T>(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(ragfuse::Error::from)?;
            serde_json::from_str(&text).map_err(ragfuse::Error::from)?
        }
        None => T::default(),
    };
    let value = serde_json::to_value(&base).map_err(ragfuse::Error::from)?;
    load_value(value, overrides, seed)
}

/// Like [`load`] but starting from an already parsed config.
pub fn load_value<T: DeserializeOwned>(
    mut value: Value,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<T, CliError> {
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        set_path(&mut value, &k, v)?;
    }
    if let Some(seed) = seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    Ok(serde_json::from_value(value).map_err(ragfuse::Error::from)?)
}
