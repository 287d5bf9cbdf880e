//! Run configuration files: TOML with `[search]`, `[data]` and `[eval]`
//! tables whose keys are the setter keys of the corresponding configs.
//! Command-line `key=value` overrides are applied afterwards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{EvalConfig, SearchConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Routes `key` to its config: `eval.*` to evaluation, `data.*` and
    /// bare keys to the search.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.strip_prefix("eval.") {
            Some(k) => self.eval.set(k, value),
            None => self.search.set(key.strip_prefix("search.").unwrap_or(key), value),
        }
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            offset: e.span().map_or(0, |s| s.start as u64),
            message: e.message().to_string(),
        })?;
        for (section, body) in &table {
            let prefix = match section.as_str() {
                "search" => "",
                "data" => "data.",
                "eval" => "eval.",
                _ => return Err(Error::config(section, "unknown section (use search, data or eval)")),
            };
            let body = body
                .as_table()
                .ok_or_else(|| Error::config(section, "expected a table"))?;
            for (k, v) in body {
                let key = format!("{prefix}{k}");
                self.set(&key, &value_text(&key, v)?)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_toml(&read_text(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.eval.validate()
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Missing(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn value_text(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| value_text(key, x))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => return Err(Error::config(key, "unsupported value type")),
    })
}
