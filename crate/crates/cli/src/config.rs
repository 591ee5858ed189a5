//! Layered run configuration: defaults, then a flat TOML file, then
//! environment variables, then command-line flags. Every key remembers
//! which layer set it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use qenet::{QenetError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "lowercase")]
pub enum Source {
    Default,
    File { path: PathBuf },
    Env { var: String },
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub values: Map<String, Value>,
    pub provenance: BTreeMap<String, Source>,
}

fn invalid(msg: String) -> QenetError {
    QenetError::InvalidArgument(msg)
}

impl RunConfig {
    pub fn from_defaults<T: Serialize>(defaults: &T) -> Result<Self> {
        let Value::Object(values) = serde_json::to_value(defaults)? else {
            return Err(invalid("defaults must serialize to a table".into()));
        };
        let provenance = values.keys().map(|k| (k.clone(), Source::Default)).collect();
        Ok(RunConfig { values, provenance })
    }

    fn known(&self, key: &str) -> Result<()> {
        if self.values.contains_key(key) {
            Ok(())
        } else {
            Err(invalid(format!("unknown configuration key {key:?}")))
        }
    }

    /// Values are converted to the type of the default where that is unambiguous.
    fn coerce(&self, key: &str, raw: &str) -> Result<Value> {
        let bad = || invalid(format!("cannot use {raw:?} for {key}"));
        Ok(match self.values.get(key) {
            Some(Value::Bool(_)) => match raw {
                "true" | "on" | "1" => Value::Bool(true),
                "false" | "off" | "0" => Value::Bool(false),
                _ => return Err(bad()),
            },
            Some(Value::Number(_)) => serde_json::from_str::<serde_json::Number>(raw).map(Value::Number).map_err(|_| bad())?,
            _ => Value::String(raw.to_string()),
        })
    }

    /// Merges a flat TOML table. Nested tables and unknown keys are errors.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| QenetError::Io { path: path.to_path_buf(), source })?;
        let table: toml::Table = text.parse().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        for (key, v) in table {
            self.known(&key)?;
            let value = match v {
                toml::Value::Table(_) | toml::Value::Array(_) => {
                    return Err(invalid(format!("{}: {key} must be a plain value", path.display())))
                }
                toml::Value::Datetime(d) => Value::String(d.to_string()),
                other => serde_json::to_value(other)?,
            };
            self.values.insert(key.clone(), value);
            self.provenance.insert(key, Source::File { path: path.to_path_buf() });
        }
        Ok(())
    }

    /// Applies `var` to `key` if `lookup` yields a non-empty value.
    pub fn merge_env(&mut self, key: &str, var: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        self.known(key)?;
        if let Some(raw) = lookup(var).filter(|v| !v.is_empty()) {
            let value = self.coerce(key, &raw)?;
            self.values.insert(key.to_string(), value);
            self.provenance.insert(key.to_string(), Source::Env { var: var.to_string() });
        }
        Ok(())
    }

    pub fn set_flag(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.known(key)?;
        self.values.insert(key.to_string(), serde_json::to_value(value)?);
        self.provenance.insert(key.to_string(), Source::Flag);
        Ok(())
    }

    pub fn resolve<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(Value::Object(self.values.clone())).map_err(|e| invalid(format!("configuration: {e}")))
    }
}

pub fn process_env(var: &str) -> Option<String> {
    std::env::var(var).ok()
}
