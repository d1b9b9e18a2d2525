//! TOML run configuration. Keys mirror the `RunConfig` field names; omitted
//! keys keep their defaults and unknown keys are rejected.

use std::path::Path;

use codi_core::harness::RunConfig;
use toml::Value;

use crate::error::{io_err, Error, Result};

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Table(g), Value::Table(k)) = (given, known) {
        for (key, value) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                None => out.push(path),
                Some(inner) => unknown_keys(value, inner, &path, out),
            }
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let given: Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&given, &merged, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    merge(&mut merged, given);
    let run: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    run.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(run)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn to_toml(run: &RunConfig) -> Result<String> {
    toml::to_string_pretty(run).map_err(|e| Error::Config(e.to_string()))
}
